// densekit command line: audit | train | eval | heatmap | sweep
//
// Exit codes: 0 success, 1 runtime/io failure, 2 configuration or validation
// failure. Results go to stdout; progress and diagnostics go to stderr.

#include <cstdlib>
#include <filesystem>
#include <fnmatch.h>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "densekit/analysis.hpp"
#include "densekit/audit.hpp"
#include "densekit/checkpoint.hpp"
#include "densekit/data.hpp"
#include "densekit/errors.hpp"
#include "densekit/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool debug_logging() {
  const char* env = std::getenv("DENSEKIT_LOG");
  return env != nullptr && std::string(env) == "debug";
}

// "synthetic:N" or a CIFAR-10 directory
struct DataSpec {
  bool synthetic = false;
  int synth_n = 0;
  std::string dir;
};

DataSpec parse_data_spec(const std::string& spec) {
  DataSpec d;
  const std::string prefix = "synthetic:";
  if (spec.rfind(prefix, 0) == 0) {
    d.synthetic = true;
    try {
      size_t used = 0;
      d.synth_n = std::stoi(spec.substr(prefix.size()), &used);
      if (used != spec.size() - prefix.size()) throw std::invalid_argument(spec);
    } catch (const std::exception&) {
      throw densekit::ConfigError("bad synthetic data spec '" + spec + "' (expected synthetic:<count>)");
    }
    if (d.synth_n < 10) throw densekit::ConfigError("synthetic dataset needs at least 10 samples, got " + spec);
    return d;
  }
  d.dir = spec;
  return d;
}

int synth_test_count(int train_n) { return std::max(100, train_n / 5); }

std::pair<densekit::Dataset, densekit::Dataset> load_data(const DataSpec& spec, uint64_t seed) {
  if (spec.synthetic) {
    return {densekit::synth_dataset(spec.synth_n, seed, "synth-train"),
            densekit::synth_dataset(synth_test_count(spec.synth_n), seed, "synth-test")};
  }
  return densekit::load_cifar10(spec.dir);
}

densekit::TrainConfig resolve_train_config(const std::string& name_or_path) {
  if (name_or_path == "desk" || name_or_path == "paper-cifar") return densekit::TrainConfig::preset(name_or_path);
  return densekit::TrainConfig::from_json_file(name_or_path);
}

densekit::NormStats stats_from_extras(const std::map<std::string, densekit::Tensor>& extras,
                                      const std::string& checkpoint) {
  auto mit = extras.find("norm.mean");
  auto sit = extras.find("norm.std");
  if (mit == extras.end() || sit == extras.end()) {
    throw densekit::FormatError("checkpoint lacks normalization statistics: " + checkpoint);
  }
  densekit::NormStats stats;
  for (int c = 0; c < 3; ++c) {
    stats.mean[static_cast<size_t>(c)] = mit->second.data()[c];
    stats.std[static_cast<size_t>(c)] = sit->second.data()[c];
  }
  return stats;
}

struct CliOptions {
  std::optional<uint64_t> seed;

  std::string audit_config;
  std::string audit_format = "table";

  std::string train_config_path;
  std::string train_recipe = "desk";
  std::string train_data;
  std::string train_out;
  std::string train_resume;

  std::string eval_checkpoint;
  std::string eval_config;
  std::string eval_data;
  int eval_batch = 256;

  std::string heatmap_checkpoint;
  std::string heatmap_out;
  std::string heatmap_format = "both";

  std::string sweep_glob;
  std::string sweep_recipe = "desk";
  std::string sweep_data = "synthetic:5000";
  std::string sweep_out;
};

int cmd_audit(const CliOptions& opt) {
  densekit::ArchConfig config = densekit::ArchConfig::from_json_file(opt.audit_config);
  densekit::LayerPlan plan = densekit::build_plan(config);
  densekit::AuditReport report = densekit::count_params(plan);
  if (opt.audit_format == "json") {
    std::cout << report.to_json().dump(2) << "\n";
  } else if (opt.audit_format == "table") {
    std::cout << report.to_table();
  } else {
    throw densekit::ConfigError("unknown audit format '" + opt.audit_format + "' (expected table or json)");
  }
  return 0;
}

int cmd_train(const CliOptions& opt) {
  densekit::ArchConfig config = densekit::ArchConfig::from_json_file(opt.train_config_path);
  densekit::TrainConfig tc = resolve_train_config(opt.train_recipe);
  if (opt.seed.has_value()) tc.seed = *opt.seed;

  auto [train_set, test_set] = load_data(parse_data_spec(opt.train_data), tc.seed);

  densekit::LayerPlan plan = densekit::build_plan(config);
  densekit::Model model = densekit::init_model(plan, tc.seed);

  densekit::TrainSinks sinks;
  sinks.out_dir = opt.train_out;
  sinks.log = &std::cerr;
  if (debug_logging() && tc.log_every == 0) tc.log_every = 50;

  densekit::TrainReport report = densekit::train(model, train_set, test_set, tc, sinks, opt.train_resume);

  json out;
  out["final_test_err"] = report.final_test_err;
  out["epochs_run"] = report.epochs.size();
  out["checkpoint"] = report.final_checkpoint;
  out["seed"] = tc.seed;
  if (!report.flags.empty()) out["flags"] = report.flags;
  std::cout << out.dump() << "\n";
  return 0;
}

int cmd_eval(const CliOptions& opt) {
  std::map<std::string, densekit::Tensor> extras;
  densekit::Model model = densekit::load_checkpoint(opt.eval_checkpoint, &extras);
  if (!opt.eval_config.empty()) {
    densekit::ArchConfig expected = densekit::ArchConfig::from_json_file(opt.eval_config);
    densekit::require_plan_match(model, densekit::build_plan(expected, model.plan.input_size));
  }
  const densekit::NormStats stats = stats_from_extras(extras, opt.eval_checkpoint);
  // synthetic eval regenerates the trainer's held-out set, so the master seed
  // defaults to the one stored in the checkpoint
  const uint64_t seed = opt.seed.value_or(model.seed);

  DataSpec spec = parse_data_spec(opt.eval_data);
  densekit::Dataset eval_set;
  if (spec.synthetic) {
    eval_set = densekit::synth_dataset(synth_test_count(spec.synth_n), seed, "synth-test");
  } else {
    eval_set = densekit::load_cifar10(spec.dir).second;
  }

  densekit::EvalResult r = densekit::evaluate(model, eval_set, stats, opt.eval_batch);
  json out;
  out["top1_error"] = r.top1_error;
  out["mean_loss"] = r.mean_loss;
  out["n"] = r.n;
  out["seed"] = seed;
  std::cout << out.dump() << "\n";
  return 0;
}

int cmd_heatmap(const CliOptions& opt) {
  densekit::Model model = densekit::load_checkpoint(opt.heatmap_checkpoint);
  densekit::HeatmapReport report = densekit::weight_heatmap(model);
  std::vector<std::string> written;
  if (opt.heatmap_format == "csv" || opt.heatmap_format == "both") {
    const std::string path = opt.heatmap_out + ".csv";
    densekit::heatmap_export_csv(report, path);
    written.push_back(path);
  }
  if (opt.heatmap_format == "pgm" || opt.heatmap_format == "both") {
    std::vector<std::string> pgms = densekit::heatmap_export_pgm(report, opt.heatmap_out);
    written.insert(written.end(), pgms.begin(), pgms.end());
  }
  if (written.empty()) {
    throw densekit::ConfigError("unknown heatmap format '" + opt.heatmap_format + "' (expected csv, pgm, or both)");
  }
  for (const std::string& p : written) std::cout << p << "\n";
  return 0;
}

int cmd_sweep(const CliOptions& opt) {
  const fs::path pattern(opt.sweep_glob);
  fs::path dir = pattern.parent_path();
  if (dir.empty()) dir = ".";
  const std::string file_pattern = pattern.filename().string();
  if (!fs::is_directory(dir)) throw densekit::IoError("sweep config directory does not exist: " + dir.string());

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    if (fnmatch(file_pattern.c_str(), entry.path().filename().c_str(), 0) == 0) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw densekit::ConfigError("sweep glob matched no config files: " + opt.sweep_glob);

  std::vector<std::pair<std::string, densekit::ArchConfig>> configs;
  for (const fs::path& f : files) {
    configs.emplace_back(f.stem().string(), densekit::ArchConfig::from_json_file(f.string()));
  }

  densekit::TrainConfig tc = resolve_train_config(opt.sweep_recipe);
  if (opt.seed.has_value()) tc.seed = *opt.seed;
  auto [train_set, test_set] = load_data(parse_data_spec(opt.sweep_data), tc.seed);

  std::vector<densekit::EfficiencyPoint> points =
      densekit::efficiency_sweep(configs, tc, train_set, test_set, &std::cerr);
  densekit::write_efficiency_csv(points, opt.sweep_out);

  json out;
  out["csv"] = opt.sweep_out;
  out["configs_run"] = points.size();
  out["configs_requested"] = configs.size();
  out["seed"] = tc.seed;
  std::cout << out.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"densekit: construct, audit, train, and analyze densely connected networks"};
  app.require_subcommand(1);

  CliOptions opt;
  uint64_t seed_arg = 0;
  CLI::Option* seed_opt = app.add_option("--seed", seed_arg, "Master seed; overrides the train config's seed");

  CLI::App* audit = app.add_subcommand("audit", "Print a per-layer parameter and FLOP report");
  audit->add_option("--config", opt.audit_config, "Architecture config JSON")->required();
  audit->add_option("--format", opt.audit_format, "table or json");

  CLI::App* train = app.add_subcommand("train", "Train a model and write checkpoints plus a JSONL report");
  train->add_option("--config", opt.train_config_path, "Architecture config JSON")->required();
  train->add_option("--train-config", opt.train_recipe, "Preset name (desk, paper-cifar) or a JSON file");
  train->add_option("--data", opt.train_data, "CIFAR-10 directory or synthetic:<count>")->required();
  train->add_option("--out", opt.train_out, "Output directory")->required();
  train->add_option("--resume", opt.train_resume, "Checkpoint to continue from");

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", opt.eval_checkpoint, "Checkpoint file")->required();
  eval->add_option("--config", opt.eval_config, "Architecture config the checkpoint must match");
  eval->add_option("--data", opt.eval_data, "CIFAR-10 directory or synthetic:<count>")->required();
  eval->add_option("--batch-size", opt.eval_batch, "Eval batch size");

  CLI::App* heatmap = app.add_subcommand("heatmap", "Export per-block connectivity-strength matrices");
  heatmap->add_option("--checkpoint", opt.heatmap_checkpoint, "Checkpoint file")->required();
  heatmap->add_option("--out", opt.heatmap_out, "Output stem; writes {stem}.csv and {stem}_block{b}.pgm")->required();
  heatmap->add_option("--format", opt.heatmap_format, "csv, pgm, or both");

  CLI::App* sweep = app.add_subcommand("sweep", "Train several configs and tabulate cost versus error");
  sweep->add_option("--configs", opt.sweep_glob, "Glob of architecture config JSON files")->required();
  sweep->add_option("--train-config", opt.sweep_recipe, "Preset name or JSON file applied to every config");
  sweep->add_option("--data", opt.sweep_data, "CIFAR-10 directory or synthetic:<count>");
  sweep->add_option("--out", opt.sweep_out, "Output CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (seed_opt->count() > 0) opt.seed = seed_arg;

  try {
    if (audit->parsed()) return cmd_audit(opt);
    if (train->parsed()) return cmd_train(opt);
    if (eval->parsed()) return cmd_eval(opt);
    if (heatmap->parsed()) return cmd_heatmap(opt);
    if (sweep->parsed()) return cmd_sweep(opt);
    std::cerr << "error: no subcommand selected\n";
    return 2;
  } catch (const densekit::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const densekit::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const densekit::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const densekit::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const densekit::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
