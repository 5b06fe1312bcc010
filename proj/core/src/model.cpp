#include "densekit/model.hpp"

#include <cmath>

#include "densekit/errors.hpp"

namespace densekit {

Tensor& Model::param(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw UsageError("model has no parameter '" + name + "'");
  return it->second;
}

const Tensor& Model::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw UsageError("model has no parameter '" + name + "'");
  return it->second;
}

int64_t Model::num_params() const {
  int64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

Model init_model(const LayerPlan& plan, uint64_t seed) {
  Model m;
  m.plan = plan;
  m.seed = seed;
  RngStream rng(seed, "init");

  auto add_param = [&m](const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    m.param_names.push_back(name);
    m.params.emplace(name, std::move(t));
  };

  for (const LayerSpec& l : plan.layers) {
    switch (l.kind) {
      case LayerKind::conv: {
        const double fan_in = static_cast<double>(l.kernel) * l.kernel * l.in_channels;
        const float stddev = static_cast<float>(std::sqrt(2.0 / fan_in));
        add_param(l.param_base + ".weight",
                  random_normal({l.out_channels, l.in_channels, l.kernel, l.kernel}, rng, stddev));
        break;
      }
      case LayerKind::bn:
        add_param(l.param_base + ".gamma", Tensor::full({l.out_channels}, 1.0f));
        add_param(l.param_base + ".beta", Tensor::zeros({l.out_channels}));
        m.running.emplace(l.param_base, BatchNormStats(l.out_channels));
        break;
      case LayerKind::linear: {
        const float stddev = static_cast<float>(std::sqrt(2.0 / static_cast<double>(l.in_channels)));
        add_param(l.param_base + ".weight", random_normal({l.out_channels, l.in_channels}, rng, stddev));
        add_param(l.param_base + ".bias", Tensor::zeros({l.out_channels}));
        break;
      }
      default:
        break;
    }
  }
  return m;
}

namespace {

struct PlanRun {
  Tape tape;
  Tape::NodeId out = -1;
  std::vector<BlockTrace> blocks;
};

// Interprets the layer program. Dense-layer outputs are retained so later
// concat_source steps can gather them; a layer's retained value is the output
// of its trailing dropout (identity when the rate is 0).
void run_plan(Model& model, const Tensor& batch, RngStream* dropout_rng, bool retain_sources, PlanRun& run) {
  const LayerPlan& plan = model.plan;
  if (plan.config.family != Family::densenet) {
    throw ConfigError("runtime executes densenet plans only; " + to_string(plan.config.family) +
                      " plans are audit-only");
  }
  if (batch.rank() != 4 || batch.dim(1) != plan.input_channels || batch.dim(2) != plan.input_size ||
      batch.dim(3) != plan.input_size) {
    throw ConfigError("batch shape " + batch.shape_str() + " does not match plan input [N," +
                      std::to_string(plan.input_channels) + "," + std::to_string(plan.input_size) + "," +
                      std::to_string(plan.input_size) + "]");
  }

  bool dropout_active = false;
  for (const LayerSpec& l : plan.layers) {
    if (l.kind == LayerKind::dropout && model.effective_dropout_rate(l.rate) > 0.0) dropout_active = true;
  }
  RngStream fallback(0, "unused");
  RngStream* drop = dropout_rng;
  if (model.mode == Mode::train && dropout_active && drop == nullptr) {
    throw UsageError("train-mode forward with active dropout needs a dropout stream");
  }
  if (drop == nullptr) drop = &fallback;

  Tape& tape = run.tape;
  Tape::NodeId cur = tape.constant(batch);
  std::vector<Tape::NodeId> retained;

  for (const LayerSpec& l : plan.layers) {
    switch (l.kind) {
      case LayerKind::conv:
        cur = tape.conv2d(cur, tape.watch(model.param(l.param_base + ".weight")), l.stride, l.padding);
        break;
      case LayerKind::bn: {
        auto it = model.running.find(l.param_base);
        if (it == model.running.end()) throw InternalError("missing running stats for " + l.param_base);
        cur = tape.batch_norm(cur, tape.watch(model.param(l.param_base + ".gamma")),
                              tape.watch(model.param(l.param_base + ".beta")), &it->second, model.mode);
        break;
      }
      case LayerKind::relu:
        cur = tape.relu(cur);
        break;
      case LayerKind::pool_avg:
        cur = tape.avg_pool2d(cur, l.kernel, l.stride);
        break;
      case LayerKind::pool_max:
        cur = tape.max_pool2d(cur, l.kernel, l.stride, l.padding);
        break;
      case LayerKind::global_pool:
        cur = tape.global_avg_pool(cur);
        break;
      case LayerKind::linear:
        cur = tape.linear(cur, tape.watch(model.param(l.param_base + ".weight")),
                          tape.watch(model.param(l.param_base + ".bias")));
        break;
      case LayerKind::dropout:
        cur = tape.dropout(cur, model.effective_dropout_rate(l.rate), model.mode, *drop);
        // the last op of a dense layer: retain its output as a concat source
        if (l.layer > 0 && l.role == "composite") retained.push_back(cur);
        break;
      case LayerKind::concat_source: {
        if (l.layer == 1 && l.role == "composite") {
          // entering a new block: the current value is source 0
          retained.assign(1, cur);
          run.blocks.push_back(BlockTrace{l.block, {}, {}});
        }
        std::vector<Tape::NodeId> picked;
        for (int s : l.sources) {
          if (s < 0 || s >= static_cast<int>(retained.size())) {
            throw InternalError("concat source " + std::to_string(s) + " not yet produced in block " +
                                std::to_string(l.block));
          }
          picked.push_back(retained[static_cast<size_t>(s)]);
        }
        if (l.role == "block_output") {
          BlockTrace& trace = run.blocks.back();
          for (Tape::NodeId id : picked) {
            trace.source_channels.push_back(tape.value(id).dim(1));
            if (retain_sources) trace.sources.push_back(tape.value(id));
          }
        }
        cur = tape.concat_channels(picked);
        break;
      }
    }
  }
  run.out = cur;
}

}  // namespace

ForwardTrace forward(Model& model, const Tensor& batch, const ForwardOptions& options, RngStream* dropout_rng) {
  PlanRun run;
  run_plan(model, batch, dropout_rng, options.retain_sources, run);
  ForwardTrace trace;
  trace.logits = run.tape.value(run.out);
  trace.blocks = std::move(run.blocks);
  return trace;
}

LossAndGrads loss_and_grads(Model& model, const Tensor& batch, const std::vector<int>& labels,
                            RngStream& dropout_rng) {
  PlanRun run;
  run_plan(model, batch, &dropout_rng, false, run);
  LossAndGrads out;
  out.logits = run.tape.value(run.out);
  Tape::NodeId loss = run.tape.softmax_cross_entropy(run.out, labels);
  run.tape.backward(loss);
  out.loss = run.tape.value(loss).data()[0];
  for (const std::string& name : model.param_names) {
    Tensor& p = model.param(name);
    out.grads.emplace(name, Tensor(p.shape(), p.grad()));
  }
  return out;
}

}  // namespace densekit
