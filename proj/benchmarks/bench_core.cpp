// Microbenchmarks for the hot paths: the conv kernels, a full forward pass,
// a gradient step, and the tooling entry points (audit, checkpoint, heatmap).
// Single threaded by design; treat the numbers as per-core costs.

#include <benchmark/benchmark.h>

#include <cstdio>
#include <filesystem>

#include "densekit/analysis.hpp"
#include "densekit/arch.hpp"
#include "densekit/audit.hpp"
#include "densekit/checkpoint.hpp"
#include "densekit/model.hpp"
#include "densekit/rng.hpp"
#include "densekit/tape.hpp"
#include "densekit/tensor.hpp"

using densekit::ArchConfig;
using densekit::Family;
using densekit::Mode;
using densekit::RngStream;
using densekit::Tape;
using densekit::Tensor;

namespace {

ArchConfig cifar_config(int depth, int k, bool bottleneck) {
  ArchConfig c;
  c.family = Family::densenet;
  c.depth_L = depth;
  c.growth_k = k;
  c.bottleneck = bottleneck;
  c.compression_theta = bottleneck ? 0.5 : 1.0;
  return c;
}

// a mid-block shape for L=40 k=12: 160 input channels at 16x16
void BM_Conv3x3Forward(benchmark::State& state) {
  RngStream rng(1, "bench");
  Tensor x = densekit::random_uniform({8, 160, 16, 16}, rng);
  Tensor w = densekit::random_uniform({12, 160, 3, 3}, rng);
  for (auto _ : state) {
    Tape tape;
    const auto y = tape.conv2d(tape.watch(x), tape.watch(w), 1, 1);
    benchmark::DoNotOptimize(tape.value(y).data());
  }
  const double flops = 2.0 * 8 * 12 * 160 * 9 * 16 * 16;
  state.counters["flops"] = benchmark::Counter(flops, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Conv3x3Forward);

void BM_Conv3x3ForwardBackward(benchmark::State& state) {
  RngStream rng(2, "bench");
  Tensor x = densekit::random_uniform({8, 160, 16, 16}, rng);
  Tensor w = densekit::random_uniform({12, 160, 3, 3}, rng);
  Tensor lw = densekit::random_uniform({2, 12}, rng);
  Tensor lb = densekit::random_uniform({2}, rng);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  const std::vector<int> labels = {0, 1, 0, 1, 0, 1, 0, 1};
  for (auto _ : state) {
    Tape tape;
    const auto y = tape.conv2d(tape.watch(x), tape.watch(w), 1, 1);
    const auto pooled = tape.global_avg_pool(y);
    const auto logits = tape.linear(pooled, tape.watch(lw), tape.watch(lb));
    const auto loss = tape.softmax_cross_entropy(logits, labels);
    tape.backward(loss);
    benchmark::DoNotOptimize(w.grad().data());
  }
}
BENCHMARK(BM_Conv3x3ForwardBackward);

void BM_DenseNet40Forward(benchmark::State& state) {
  const densekit::LayerPlan plan = densekit::build_plan(cifar_config(40, 12, false));
  densekit::Model model = densekit::init_model(plan, 7);
  model.mode = Mode::eval;
  RngStream rng(3, "bench");
  const Tensor batch = densekit::random_uniform({8, 3, 32, 32}, rng);
  for (auto _ : state) {
    const densekit::ForwardTrace trace = densekit::forward(model, batch);
    benchmark::DoNotOptimize(trace.logits.data());
  }
  state.counters["images"] = benchmark::Counter(8, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_DenseNet40Forward);

void BM_DenseNet40Gradients(benchmark::State& state) {
  const densekit::LayerPlan plan = densekit::build_plan(cifar_config(40, 12, false));
  densekit::Model model = densekit::init_model(plan, 7);
  model.mode = Mode::train;
  RngStream rng(4, "bench");
  const Tensor batch = densekit::random_uniform({8, 3, 32, 32}, rng);
  std::vector<int> labels;
  for (int i = 0; i < 8; ++i) labels.push_back(i % 10);
  for (auto _ : state) {
    RngStream dropout(5, "bench-dropout");
    const densekit::LossAndGrads lg = densekit::loss_and_grads(model, batch, labels, dropout);
    benchmark::DoNotOptimize(lg.loss);
  }
  state.counters["images"] = benchmark::Counter(8, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_DenseNet40Gradients);

void BM_AuditBC190(benchmark::State& state) {
  for (auto _ : state) {
    const densekit::LayerPlan plan = densekit::build_plan(cifar_config(190, 40, true));
    const densekit::AuditReport report = densekit::count_params(plan);
    benchmark::DoNotOptimize(report.total_params);
  }
}
BENCHMARK(BM_AuditBC190);

void BM_CheckpointSaveLoad(benchmark::State& state) {
  ArchConfig config;
  config.family = Family::densenet;
  config.growth_k = 8;
  config.block_layers = {4};
  const densekit::LayerPlan plan = densekit::build_plan(config);
  const densekit::Model model = densekit::init_model(plan, 11);
  const std::string path = (std::filesystem::temp_directory_path() / "densekit_bench.dkpt").string();
  for (auto _ : state) {
    densekit::save_checkpoint(model, path);
    const densekit::Model loaded = densekit::load_checkpoint(path);
    benchmark::DoNotOptimize(loaded.epoch);
  }
  std::remove(path.c_str());
}
BENCHMARK(BM_CheckpointSaveLoad);

void BM_WeightHeatmap(benchmark::State& state) {
  const densekit::LayerPlan plan = densekit::build_plan(cifar_config(40, 12, false));
  const densekit::Model model = densekit::init_model(plan, 13);
  for (auto _ : state) {
    const densekit::HeatmapReport report = densekit::weight_heatmap(model);
    benchmark::DoNotOptimize(report.blocks.size());
  }
}
BENCHMARK(BM_WeightHeatmap);

}  // namespace

BENCHMARK_MAIN();
