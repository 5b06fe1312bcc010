#include "densekit/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "densekit/checkpoint.hpp"
#include "densekit/errors.hpp"

namespace densekit {

using nlohmann::json;
namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1, got " + std::to_string(epochs));
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1, got " + std::to_string(batch_size));
  if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive, got " + std::to_string(base_lr));
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0,1), got " + std::to_string(momentum));
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0, got " + std::to_string(weight_decay));
  if (dropout_rate >= 1.0) throw ConfigError("dropout_rate must be below 1, got " + std::to_string(dropout_rate));
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
    throw ConfigError("val_fraction must be in [0,1), got " + std::to_string(val_fraction));
  }
  if (limit_train_n < 0) throw ConfigError("limit_train_n must be >= 0, got " + std::to_string(limit_train_n));
  if (log_every < 0) throw ConfigError("log_every must be >= 0, got " + std::to_string(log_every));
  double prev = 0.0;
  for (double m : lr_milestones) {
    if (!(m > 0.0 && m < 1.0)) throw ConfigError("lr milestone " + std::to_string(m) + " must lie in (0,1)");
    if (m <= prev) throw ConfigError("lr milestones must be strictly increasing");
    prev = m;
  }
}

TrainConfig TrainConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  static const std::vector<std::string> known = {
      "epochs",     "batch_size",   "base_lr",      "momentum",  "weight_decay",      "nesterov",
      "dropout_rate", "lr_milestones", "seed",      "val_fraction", "limit_train_n", "log_every",
      "augment",    "decay_bn_and_bias"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const std::string& k : known) ok = ok || (it.key() == k);
    if (!ok) throw ConfigError("unknown train config key '" + it.key() + "'");
  }
  TrainConfig c;
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
  if (j.contains("base_lr")) c.base_lr = j.at("base_lr").get<double>();
  if (j.contains("momentum")) c.momentum = j.at("momentum").get<double>();
  if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("nesterov")) c.nesterov = j.at("nesterov").get<bool>();
  if (j.contains("dropout_rate")) c.dropout_rate = j.at("dropout_rate").get<double>();
  if (j.contains("lr_milestones")) c.lr_milestones = j.at("lr_milestones").get<std::vector<double>>();
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  if (j.contains("val_fraction")) c.val_fraction = j.at("val_fraction").get<double>();
  if (j.contains("limit_train_n")) c.limit_train_n = j.at("limit_train_n").get<int>();
  if (j.contains("log_every")) c.log_every = j.at("log_every").get<int>();
  if (j.contains("augment")) c.augment = j.at("augment").get<bool>();
  if (j.contains("decay_bn_and_bias")) c.decay_bn_and_bias = j.at("decay_bn_and_bias").get<bool>();
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open train config file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw FormatError("train config " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

TrainConfig TrainConfig::preset(const std::string& name) {
  TrainConfig c;
  if (name == "desk") {
    // smoke-scale profile; augmentation stays off because the synthetic labels
    // are tied to blob position, which a mirror flip would contradict
    c.epochs = 20;
    c.batch_size = 64;
    c.limit_train_n = 5000;
    c.augment = false;
    return c;
  }
  if (name == "paper-cifar") {
    c.epochs = 300;
    c.batch_size = 64;
    c.augment = true;
    return c;
  }
  throw ConfigError("unknown train preset '" + name + "' (expected desk or paper-cifar)");
}

json TrainConfig::to_json() const {
  json j;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["base_lr"] = base_lr;
  j["momentum"] = momentum;
  j["weight_decay"] = weight_decay;
  j["nesterov"] = nesterov;
  j["dropout_rate"] = dropout_rate;
  j["lr_milestones"] = lr_milestones;
  j["seed"] = seed;
  j["val_fraction"] = val_fraction;
  j["limit_train_n"] = limit_train_n;
  j["log_every"] = log_every;
  j["augment"] = augment;
  j["decay_bn_and_bias"] = decay_bn_and_bias;
  return j;
}

double lr_schedule(int epoch, int total_epochs, double base_lr, const std::vector<double>& milestones) {
  if (epoch < 0 || total_epochs < 1) throw UsageError("lr_schedule: bad epoch/total");
  double lr = base_lr;
  for (double m : milestones) {
    if (epoch >= static_cast<int>(std::floor(m * total_epochs))) lr /= 10.0;
  }
  return lr;
}

void sgd_step(Model& model, const std::map<std::string, Tensor>& grads, OptimizerState& state, double lr,
              double momentum, double weight_decay, bool nesterov, bool decay_bn_and_bias) {
  const float flr = static_cast<float>(lr);
  const float fmu = static_cast<float>(momentum);
  const float fwd = static_cast<float>(weight_decay);
  for (const std::string& name : model.param_names) {
    auto git = grads.find(name);
    if (git == grads.end()) throw InternalError("sgd_step: missing gradient for '" + name + "'");
    Tensor& p = model.param(name);
    const Tensor& g = git->second;
    if (!p.same_shape(g)) {
      throw InternalError("sgd_step: gradient shape " + g.shape_str() + " mismatches parameter " + p.shape_str());
    }
    auto [vit, inserted] = state.velocity.try_emplace(name);
    if (inserted) vit->second.assign(static_cast<size_t>(p.numel()), 0.0f);
    std::vector<float>& v = vit->second;

    bool decay = decay_bn_and_bias;
    if (!decay) {
      auto ends_with = [&name](const char* suffix) {
        const size_t len = std::strlen(suffix);
        return name.size() >= len && name.compare(name.size() - len, len, suffix) == 0;
      };
      decay = !(ends_with(".gamma") || ends_with(".beta") || ends_with(".bias"));
    }
    const float wd = decay ? fwd : 0.0f;

    float* w = p.data();
    const float* gd = g.data();
    for (int64_t i = 0; i < p.numel(); ++i) {
      const float gi = gd[i] + wd * w[i];
      v[static_cast<size_t>(i)] = fmu * v[static_cast<size_t>(i)] + gi;
      w[i] -= flr * (nesterov ? gi + fmu * v[static_cast<size_t>(i)] : v[static_cast<size_t>(i)]);
    }
  }
}

json EpochLog::to_json() const {
  json j;
  j["epoch"] = epoch;
  j["lr"] = lr;
  j["train_loss"] = train_loss;
  j["train_err"] = train_err;
  j["test_err"] = test_err;
  j["wall_seconds"] = wall_seconds;
  return j;
}

namespace {

int argmax_row(const float* row, int k) {
  int best = 0;
  for (int i = 1; i < k; ++i) {
    if (row[i] > row[best]) best = i;  // strict: ties keep the lowest index
  }
  return best;
}

std::map<std::string, Tensor> velocity_extras(const OptimizerState& state, const NormStats& stats) {
  std::map<std::string, Tensor> extras;
  for (const auto& [name, v] : state.velocity) {
    extras.emplace("optimizer.velocity." + name, Tensor({static_cast<int>(v.size())}, v));
  }
  extras.emplace("norm.mean", Tensor({3}, {stats.mean[0], stats.mean[1], stats.mean[2]}));
  extras.emplace("norm.std", Tensor({3}, {stats.std[0], stats.std[1], stats.std[2]}));
  return extras;
}

// median-of-three smoothing, endpoints passed through
std::vector<double> median3(const std::vector<double>& xs) {
  std::vector<double> out = xs;
  for (size_t i = 1; i + 1 < xs.size(); ++i) {
    double a = xs[i - 1], b = xs[i], c = xs[i + 1];
    out[i] = std::max(std::min(a, b), std::min(std::max(a, b), c));
  }
  return out;
}

}  // namespace

TrainReport train(Model& model, const Dataset& train_set, const Dataset& test_set, const TrainConfig& config,
                  const TrainSinks& sinks, const std::string& resume_from) {
  config.validate();
  if (config.dropout_rate >= 0.0) model.dropout_override = config.dropout_rate;

  OptimizerState opt;
  if (!resume_from.empty()) {
    std::map<std::string, Tensor> extras;
    Model loaded = load_checkpoint(resume_from, &extras);
    require_plan_match(loaded, model.plan);
    model.params = std::move(loaded.params);
    model.running = std::move(loaded.running);
    model.param_names = std::move(loaded.param_names);
    model.epoch = loaded.epoch;
    model.seed = loaded.seed;
    for (auto& [name, t] : extras) {
      const std::string prefix = "optimizer.velocity.";
      if (name.rfind(prefix, 0) == 0) opt.velocity[name.substr(prefix.size())] = t.buffer();
    }
  }
  const uint64_t seed = model.seed;

  // seeded subset, then an optional validation carve; both orders are stable
  Dataset working;
  const Dataset* train_ptr = &train_set;
  if (config.limit_train_n > 0 && config.limit_train_n < train_set.n) {
    RngStream rng(seed, "subset");
    std::vector<int> order = permutation(train_set.n, rng);
    order.resize(static_cast<size_t>(config.limit_train_n));
    std::sort(order.begin(), order.end());
    working = train_set.subset(order, train_set.name + "-subset");
    train_ptr = &working;
  }
  Dataset val_set;
  Dataset train_final;
  const Dataset* eval_ptr = &test_set;
  if (config.val_fraction > 0.0) {
    const int n = train_ptr->n;
    const int val_n = static_cast<int>(std::floor(config.val_fraction * n));
    if (val_n < 1 || val_n >= n) {
      throw ConfigError("val_fraction " + std::to_string(config.val_fraction) + " leaves no usable split of " +
                        std::to_string(n) + " samples");
    }
    RngStream rng(seed, "valsplit");
    std::vector<int> order = permutation(n, rng);
    std::vector<int> val_idx(order.begin(), order.begin() + val_n);
    std::vector<int> train_idx(order.begin() + val_n, order.end());
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    val_set = train_ptr->subset(val_idx, train_ptr->name + "-val");
    train_final = train_ptr->subset(train_idx, train_ptr->name + "-fit");
    train_ptr = &train_final;
    eval_ptr = &val_set;
  }
  if (train_ptr->num_classes != model.plan.config.num_classes) {
    throw ConfigError("dataset has " + std::to_string(train_ptr->num_classes) + " classes, model expects " +
                      std::to_string(model.plan.config.num_classes));
  }

  const NormStats stats = compute_norm_stats(*train_ptr);

  const bool to_disk = !sinks.out_dir.empty();
  fs::path out_dir(sinks.out_dir);
  std::ofstream jsonl;
  if (to_disk) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + sinks.out_dir + ": " + ec.message());
    jsonl.open(out_dir / "report.jsonl", std::ios::app);
    if (!jsonl) throw IoError("cannot open report file in " + sinks.out_dir);
  }

  Batcher batcher(*train_ptr, stats, BatcherOptions{config.batch_size, true, config.augment, seed});
  const int steps_per_epoch = batcher.batches_per_epoch();

  TrainReport report;
  if (model.epoch >= config.epochs) {
    throw ConfigError("model has already completed " + std::to_string(model.epoch) + " of " +
                      std::to_string(config.epochs) + " epochs");
  }

  model.mode = Mode::train;
  for (int e = model.epoch; e < config.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_schedule(e, config.epochs, config.base_lr, config.lr_milestones);
    double loss_sum = 0.0;
    int64_t seen = 0, wrong = 0;

    Batcher::Epoch ep = batcher.epoch(e);
    Batch batch;
    int step = 0;
    model.mode = Mode::train;
    while (ep.next(batch)) {
      RngStream dropout_rng(seed, "dropout", static_cast<uint64_t>(e), static_cast<uint64_t>(step));
      LossAndGrads lg = loss_and_grads(model, batch.images, batch.labels, dropout_rng);
      if (!std::isfinite(lg.loss)) {
        throw DivergenceError("loss became non-finite at epoch " + std::to_string(e) + " step " +
                              std::to_string(step) + " (lr " + std::to_string(lr) + ")");
      }
      const int b = batch.images.dim(0);
      loss_sum += static_cast<double>(lg.loss) * b;
      for (int i = 0; i < b; ++i) {
        const int pred = argmax_row(lg.logits.data() + static_cast<int64_t>(i) * lg.logits.dim(1), lg.logits.dim(1));
        if (pred != batch.labels[static_cast<size_t>(i)]) wrong += 1;
      }
      seen += b;
      sgd_step(model, lg.grads, opt, lr, config.momentum, config.weight_decay, config.nesterov,
               config.decay_bn_and_bias);
      if (sinks.log != nullptr && config.log_every > 0 && step % config.log_every == 0) {
        (*sinks.log) << "epoch " << e << " step " << step << "/" << steps_per_epoch << " loss " << lg.loss << " lr "
                     << lr << "\n";
      }
      step += 1;
    }

    EvalResult ev = evaluate(model, *eval_ptr, stats, std::max(config.batch_size, 256));
    model.mode = Mode::train;
    model.epoch = e + 1;

    EpochLog log;
    log.epoch = e;
    log.lr = lr;
    log.train_loss = loss_sum / static_cast<double>(seen);
    log.train_err = static_cast<double>(wrong) / static_cast<double>(seen);
    log.test_err = ev.top1_error;
    log.wall_seconds =
        std::chrono::duration_cast<std::chrono::duration<double>>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(log);
    report.final_test_err = ev.top1_error;

    if (sinks.log != nullptr) {
      (*sinks.log) << "epoch " << e << " lr " << lr << " train_loss " << log.train_loss << " train_err "
                   << log.train_err << " test_err " << log.test_err << " (" << log.wall_seconds << "s)\n";
    }
    if (to_disk) {
      jsonl << log.to_json().dump() << "\n";
      jsonl.flush();
      if (!jsonl) throw IoError("failed writing report in " + sinks.out_dir);
      const std::map<std::string, Tensor> extras = velocity_extras(opt, stats);
      const std::string ckpt = (out_dir / ("epoch_" + std::to_string(e + 1) + ".dkpt")).string();
      save_checkpoint(model, ckpt, &extras);
      report.final_checkpoint = ckpt;
    }
  }

  // a healthy run's early loss curve should not climb once median-smoothed
  const size_t probe = std::min<size_t>(5, report.epochs.size());
  if (probe >= 2) {
    std::vector<double> losses;
    for (size_t i = 0; i < probe; ++i) losses.push_back(report.epochs[i].train_loss);
    const std::vector<double> smooth = median3(losses);
    for (size_t i = 0; i + 1 < smooth.size(); ++i) {
      if (smooth[i + 1] > smooth[i] + 1e-9) {
        report.flags.push_back("train-loss-not-decreasing-over-first-epochs");
        if (sinks.log != nullptr) (*sinks.log) << "flag: " << report.flags.back() << "\n";
        break;
      }
    }
  }
  return report;
}

EvalResult evaluate(Model& model, const Dataset& dataset, const NormStats& stats, int batch_size) {
  const Mode saved = model.mode;
  model.mode = Mode::eval;
  Batcher batcher(dataset, stats, BatcherOptions{batch_size, false, false, model.seed});
  Batcher::Epoch ep = batcher.epoch(0);
  Batch batch;
  int64_t wrong = 0;
  double loss_sum = 0.0;
  while (ep.next(batch)) {
    ForwardTrace trace = forward(model, batch.images);
    const int b = batch.images.dim(0);
    const int k = trace.logits.dim(1);
    for (int i = 0; i < b; ++i) {
      const float* row = trace.logits.data() + static_cast<int64_t>(i) * k;
      if (argmax_row(row, k) != batch.labels[static_cast<size_t>(i)]) wrong += 1;
      // stable mean loss via the same max-subtraction as the training loss
      float mx = row[0];
      for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (int j = 0; j < k; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
      loss_sum += -(static_cast<double>(row[batch.labels[static_cast<size_t>(i)]]) - mx - std::log(sum));
    }
  }
  model.mode = saved;
  EvalResult r;
  r.n = dataset.n;
  r.top1_error = static_cast<double>(wrong) / static_cast<double>(dataset.n);
  r.mean_loss = loss_sum / static_cast<double>(dataset.n);
  return r;
}

}  // namespace densekit
