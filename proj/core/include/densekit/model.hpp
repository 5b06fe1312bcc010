#pragma once

#include <map>
#include <string>
#include <vector>

#include "densekit/arch.hpp"
#include "densekit/tape.hpp"

namespace densekit {

// A plan bound to parameter storage. Parameters keep their plan-derived names;
// param_names preserves plan order, which fixes every iteration order downstream
// (updates, serialization, gradient maps).
struct Model {
  LayerPlan plan;
  Mode mode = Mode::train;
  uint64_t seed = 0;  // master seed the parameters were drawn from
  int epoch = 0;      // fully completed training epochs
  // >= 0 overrides the plan's dropout rate at execution time
  double dropout_override = -1.0;

  std::vector<std::string> param_names;
  std::map<std::string, Tensor> params;
  std::map<std::string, BatchNormStats> running;  // keyed by the bn layer's param_base

  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  int64_t num_params() const;
  double effective_dropout_rate(double plan_rate) const {
    return dropout_override >= 0.0 ? dropout_override : plan_rate;
  }
};

// He initialization from the ("init") substream of `seed`, in plan order:
// conv ~ N(0, sqrt(2/(kh*kw*Cin))), linear ~ N(0, sqrt(2/F)), gamma 1, beta 0,
// bias 0, running mean 0, running var 1
Model init_model(const LayerPlan& plan, uint64_t seed);

struct ForwardOptions {
  bool retain_sources = false;  // keep per-block source activations in the trace
};

struct BlockTrace {
  int block = 0;
  std::vector<int> source_channels;  // widths of [block input, layer 1 output, ...]
  std::vector<Tensor> sources;       // filled only when retain_sources is set
};

struct ForwardTrace {
  Tensor logits;
  std::vector<BlockTrace> blocks;
};

// Runs the plan on a [N,3,S,S] batch. Only densenet plans execute; training
// mode with an active dropout rate needs the caller to pass the stream that
// owns this step's mask draws.
ForwardTrace forward(Model& model, const Tensor& batch, const ForwardOptions& options = {},
                     RngStream* dropout_rng = nullptr);

struct LossAndGrads {
  float loss = 0.0f;
  Tensor logits;
  std::map<std::string, Tensor> grads;  // one entry per parameter, same shapes
};

LossAndGrads loss_and_grads(Model& model, const Tensor& batch, const std::vector<int>& labels,
                            RngStream& dropout_rng);

}  // namespace densekit
