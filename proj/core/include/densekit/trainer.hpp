#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "densekit/data.hpp"
#include "densekit/model.hpp"
#include "json.hpp"

namespace densekit {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 64;
  double base_lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool nesterov = true;
  // >= 0 overrides the architecture's dropout rate
  double dropout_rate = -1.0;
  // fractions of total epochs; lr drops by 10x at floor(m * epochs)
  std::vector<double> lr_milestones = {0.5, 0.75};
  uint64_t seed = 42;
  // > 0 carves a validation split off the training set and reports on it
  double val_fraction = 0.0;
  // > 0 trains on a seeded random subset of this size
  int limit_train_n = 0;
  // > 0 emits a progress line every this many steps
  int log_every = 0;
  bool augment = true;
  // weight decay normally covers bn gamma/beta and the classifier bias too
  bool decay_bn_and_bias = true;

  void validate() const;
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig from_json_file(const std::string& path);
  // "desk" (synthetic-scale smoke profile) or "paper-cifar" (full 300-epoch recipe)
  static TrainConfig preset(const std::string& name);
  nlohmann::json to_json() const;
};

// base_lr * 10^-(number of milestones already passed); epoch is 0-based
double lr_schedule(int epoch, int total_epochs, double base_lr, const std::vector<double>& milestones);

struct OptimizerState {
  std::map<std::string, std::vector<float>> velocity;
};

// SGD with momentum, decoupled nothing: decay folds into the gradient first.
//   g' = g + weight_decay * w
//   v  = momentum * v + g'
//   w -= lr * (g' + momentum * v)   (nesterov)
//   w -= lr * v                     (plain momentum)
void sgd_step(Model& model, const std::map<std::string, Tensor>& grads, OptimizerState& state, double lr,
              double momentum, double weight_decay, bool nesterov, bool decay_bn_and_bias = true);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_err = 0.0;
  double test_err = 0.0;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
};

struct TrainReport {
  std::vector<EpochLog> epochs;
  std::string final_checkpoint;
  double final_test_err = 1.0;
  std::vector<std::string> flags;  // e.g. the early-loss monotonicity warning
};

struct TrainSinks {
  // when set: report.jsonl and epoch_{n}.dkpt files are written here
  std::string out_dir;
  std::ostream* log = nullptr;
};

// Runs the full loop: seeded subset/validation carving, per-epoch shuffle and
// augmentation, SGD with the milestone schedule, an eval pass per epoch, JSONL
// reporting, and a checkpoint per epoch (with optimizer velocity and the
// normalization statistics, so resumed runs continue bit-identically).
// All randomness derives from model.seed. A non-finite loss aborts with
// DivergenceError naming epoch, step, and lr.
TrainReport train(Model& model, const Dataset& train_set, const Dataset& test_set, const TrainConfig& config,
                  const TrainSinks& sinks, const std::string& resume_from = "");

struct EvalResult {
  double top1_error = 1.0;
  double mean_loss = 0.0;
  int n = 0;
};

// eval-mode pass; argmax ties resolve to the lowest class index
EvalResult evaluate(Model& model, const Dataset& dataset, const NormStats& stats, int batch_size = 256);

}  // namespace densekit
