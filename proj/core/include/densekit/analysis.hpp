#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "densekit/model.hpp"
#include "densekit/trainer.hpp"

namespace densekit {

// Per-block connectivity-strength matrix. Entry m[s][col] is the mean absolute
// weight that target `col` assigns to source slice s of its concatenated input:
//   sum |W| over the slice's channels / (out_channels * slice_width * kernel_area)
// Rows s = 0..n (0 is the block input, s >= 1 is layer s's output). Columns
// 0..n-1 are targets ell = col+1 inside the block; the last column is the
// trailing consumer (the transition conv, or the classifier for the final
// block). A regular entry exists only when s <= ell-1; the rest are NaN.
struct HeatmapBlock {
  int block = 0;     // 1-based
  int n_layers = 0;  // matrix is (n_layers+1) x (n_layers+1)
  std::vector<int> source_widths;
  std::string trailing;  // "transition" or "classifier"
  std::vector<std::vector<double>> m;
};

struct HeatmapReport {
  std::vector<HeatmapBlock> blocks;
};

// plain densenet models only: bottleneck 1x1 convs re-mix the concatenated
// input before any 3x3 sees it, so per-source attribution is not defined there
HeatmapReport weight_heatmap(const Model& model);

// "block,source_s,target_l,value" rows; undefined entries serialize as NaN;
// doubles carry max_digits10 precision so a parse round-trips exactly
void heatmap_export_csv(const HeatmapReport& report, const std::string& path);
HeatmapReport heatmap_from_csv(const std::string& path);

// one plain (P2) PGM per block at "{stem}_block{b}.pgm", normalized by the
// block's max entry; undefined cells render as 0
std::vector<std::string> heatmap_export_pgm(const HeatmapReport& report, const std::string& stem);

struct EfficiencyPoint {
  std::string config_id;
  long long params = 0;
  double test_error = 1.0;
  long long flops = 0;
};

// Trains each architecture under the same recipe and pairs its cost with its
// final test error. A config that fails is reported to `log` and skipped; the
// sweep continues. Results come back sorted by parameter count.
std::vector<EfficiencyPoint> efficiency_sweep(const std::vector<std::pair<std::string, ArchConfig>>& configs,
                                              const TrainConfig& train_config, const Dataset& train_set,
                                              const Dataset& test_set, std::ostream* log);

// header "config,params,test_error,flops"
void write_efficiency_csv(const std::vector<EfficiencyPoint>& points, const std::string& path);

}  // namespace densekit
