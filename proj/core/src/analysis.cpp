#include "densekit/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>

#include "densekit/audit.hpp"
#include "densekit/errors.hpp"

namespace densekit {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// mean |W| over one source slice of a conv weight [out, in, kh, kw]
double slice_mean_abs(const Tensor& w, int channel_offset, int slice_width) {
  const int out = w.dim(0), in = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (channel_offset + slice_width > in) throw InternalError("heatmap slice exceeds conv input channels");
  const int64_t kk = static_cast<int64_t>(kh) * kw;
  double sum = 0.0;
  for (int co = 0; co < out; ++co) {
    for (int ci = channel_offset; ci < channel_offset + slice_width; ++ci) {
      const float* k = w.data() + (static_cast<int64_t>(co) * in + ci) * kk;
      for (int64_t i = 0; i < kk; ++i) sum += std::fabs(k[i]);
    }
  }
  return sum / (static_cast<double>(out) * slice_width * kk);
}

// mean |W| over one source slice of the classifier weight [K, F]
double linear_slice_mean_abs(const Tensor& w, int offset, int width) {
  const int k = w.dim(0), f = w.dim(1);
  if (offset + width > f) throw InternalError("heatmap slice exceeds classifier features");
  double sum = 0.0;
  for (int r = 0; r < k; ++r) {
    const float* row = w.data() + static_cast<int64_t>(r) * f;
    for (int c = offset; c < offset + width; ++c) sum += std::fabs(row[c]);
  }
  return sum / (static_cast<double>(k) * width);
}

}  // namespace

HeatmapReport weight_heatmap(const Model& model) {
  const LayerPlan& plan = model.plan;
  if (plan.config.family != Family::densenet || plan.config.bottleneck) {
    throw ConfigError("heatmap analysis requires a plain (non-bottleneck) densenet; got " + arch_id(plan.config));
  }

  // block input widths come straight from the plan's first-layer concats
  std::vector<int> block_inputs;
  for (const LayerSpec& l : plan.layers) {
    if (l.kind == LayerKind::concat_source && l.role == "composite" && l.layer == 1) {
      block_inputs.push_back(l.in_channels);
    }
  }
  const int num_blocks = static_cast<int>(plan.block_sizes.size());
  if (static_cast<int>(block_inputs.size()) != num_blocks) throw InternalError("heatmap: plan structure unexpected");

  const int k = plan.config.growth_k;
  HeatmapReport report;
  for (int b = 1; b <= num_blocks; ++b) {
    const int n = plan.block_sizes[static_cast<size_t>(b - 1)];
    HeatmapBlock hb;
    hb.block = b;
    hb.n_layers = n;
    hb.trailing = b < num_blocks ? "transition" : "classifier";
    hb.source_widths.push_back(block_inputs[static_cast<size_t>(b - 1)]);
    for (int s = 1; s <= n; ++s) hb.source_widths.push_back(k);
    hb.m.assign(static_cast<size_t>(n + 1), std::vector<double>(static_cast<size_t>(n + 1), kNaN));

    // regular columns: target layer ell consumes sources 0..ell-1
    for (int ell = 1; ell <= n; ++ell) {
      const Tensor& w =
          model.param("block" + std::to_string(b) + ".layer" + std::to_string(ell) + ".conv1.weight");
      int offset = 0;
      for (int s = 0; s <= ell - 1; ++s) {
        const int width = hb.source_widths[static_cast<size_t>(s)];
        hb.m[static_cast<size_t>(s)][static_cast<size_t>(ell - 1)] = slice_mean_abs(w, offset, width);
        offset += width;
      }
    }
    // trailing column sees the whole block output, so every row is defined
    if (hb.trailing == "transition") {
      const Tensor& w = model.param("transition" + std::to_string(b) + ".conv.weight");
      int offset = 0;
      for (int s = 0; s <= n; ++s) {
        const int width = hb.source_widths[static_cast<size_t>(s)];
        hb.m[static_cast<size_t>(s)][static_cast<size_t>(n)] = slice_mean_abs(w, offset, width);
        offset += width;
      }
    } else {
      const Tensor& w = model.param("classifier.weight");
      int offset = 0;
      for (int s = 0; s <= n; ++s) {
        const int width = hb.source_widths[static_cast<size_t>(s)];
        hb.m[static_cast<size_t>(s)][static_cast<size_t>(n)] = linear_slice_mean_abs(w, offset, width);
        offset += width;
      }
    }
    report.blocks.push_back(std::move(hb));
  }
  return report;
}

void heatmap_export_csv(const HeatmapReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open heatmap csv for writing: " + path);
  out << "block,source_s,target_l,value\n";
  char buf[64];
  for (const HeatmapBlock& hb : report.blocks) {
    for (int s = 0; s <= hb.n_layers; ++s) {
      for (int col = 0; col <= hb.n_layers; ++col) {
        const double v = hb.m[static_cast<size_t>(s)][static_cast<size_t>(col)];
        if (std::isnan(v)) {
          std::snprintf(buf, sizeof(buf), "NaN");
        } else {
          std::snprintf(buf, sizeof(buf), "%.17g", v);
        }
        out << hb.block << "," << s << "," << (col + 1) << "," << buf << "\n";
      }
    }
  }
  out.flush();
  if (!out) throw IoError("failed writing heatmap csv: " + path);
}

HeatmapReport heatmap_from_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open heatmap csv: " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("heatmap csv is empty: " + path);
  if (line != "block,source_s,target_l,value") {
    throw FormatError("heatmap csv has unexpected header '" + line + "'");
  }
  struct Cell {
    int block, s, l;
    double v;
  };
  std::vector<Cell> cells;
  int max_block = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Cell c;
    char value[64];
    if (std::sscanf(line.c_str(), "%d,%d,%d,%63s", &c.block, &c.s, &c.l, value) != 4) {
      throw FormatError("bad heatmap csv row '" + line + "'");
    }
    c.v = std::strcmp(value, "NaN") == 0 ? kNaN : std::strtod(value, nullptr);
    max_block = std::max(max_block, c.block);
    cells.push_back(c);
  }
  HeatmapReport report;
  for (int b = 1; b <= max_block; ++b) {
    int max_l = 0;
    for (const Cell& c : cells) {
      if (c.block == b) max_l = std::max(max_l, c.l);
    }
    HeatmapBlock hb;
    hb.block = b;
    hb.n_layers = max_l - 1;  // columns run 1..n+1
    hb.m.assign(static_cast<size_t>(hb.n_layers + 1), std::vector<double>(static_cast<size_t>(hb.n_layers + 1), kNaN));
    for (const Cell& c : cells) {
      if (c.block != b) continue;
      hb.m[static_cast<size_t>(c.s)][static_cast<size_t>(c.l - 1)] = c.v;
    }
    report.blocks.push_back(std::move(hb));
  }
  return report;
}

std::vector<std::string> heatmap_export_pgm(const HeatmapReport& report, const std::string& stem) {
  std::vector<std::string> written;
  for (const HeatmapBlock& hb : report.blocks) {
    const int dim = hb.n_layers + 1;
    double max_v = 0.0;
    for (const auto& row : hb.m) {
      for (double v : row) {
        if (!std::isnan(v)) max_v = std::max(max_v, v);
      }
    }
    const std::string path = stem + "_block" + std::to_string(hb.block) + ".pgm";
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open pgm for writing: " + path);
    out << "P2\n" << dim << " " << dim << "\n255\n";
    for (int s = 0; s < dim; ++s) {
      for (int col = 0; col < dim; ++col) {
        const double v = hb.m[static_cast<size_t>(s)][static_cast<size_t>(col)];
        int g = 0;
        if (!std::isnan(v) && max_v > 0.0) g = static_cast<int>(std::lround(v / max_v * 255.0));
        out << g << (col + 1 < dim ? " " : "\n");
      }
    }
    out.flush();
    if (!out) throw IoError("failed writing pgm: " + path);
    written.push_back(path);
  }
  return written;
}

std::vector<EfficiencyPoint> efficiency_sweep(const std::vector<std::pair<std::string, ArchConfig>>& configs,
                                              const TrainConfig& train_config, const Dataset& train_set,
                                              const Dataset& test_set, std::ostream* log) {
  std::vector<EfficiencyPoint> points;
  for (const auto& [id, config] : configs) {
    try {
      LayerPlan plan = build_plan(config);
      Model model = init_model(plan, train_config.seed);
      TrainSinks sinks;
      sinks.log = log;
      if (log != nullptr) (*log) << "sweep: training " << id << " (" << arch_id(config) << ")\n";
      TrainReport tr = train(model, train_set, test_set, train_config, sinks);
      AuditReport audit = count_params(plan);
      EfficiencyPoint p;
      p.config_id = id;
      p.params = audit.total_params;
      p.test_error = tr.final_test_err;
      p.flops = audit.total_flops;
      points.push_back(std::move(p));
    } catch (const Error& e) {
      if (log != nullptr) (*log) << "sweep: config " << id << " failed: " << e.what() << "\n";
    }
  }
  std::sort(points.begin(), points.end(), [](const EfficiencyPoint& a, const EfficiencyPoint& b) {
    return a.params != b.params ? a.params < b.params : a.config_id < b.config_id;
  });
  return points;
}

void write_efficiency_csv(const std::vector<EfficiencyPoint>& points, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open sweep csv for writing: " + path);
  out << "config,params,test_error,flops\n";
  char buf[64];
  for (const EfficiencyPoint& p : points) {
    std::snprintf(buf, sizeof(buf), "%.17g", p.test_error);
    out << p.config_id << "," << p.params << "," << buf << "," << p.flops << "\n";
  }
  out.flush();
  if (!out) throw IoError("failed writing sweep csv: " + path);
}

}  // namespace densekit
