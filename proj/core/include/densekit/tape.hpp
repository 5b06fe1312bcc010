#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include "densekit/rng.hpp"
#include "densekit/tensor.hpp"

namespace densekit {

enum class Mode { train, eval };

inline constexpr float kBnEps = 1e-5f;
inline constexpr float kBnMomentum = 0.9f;  // running <- 0.9*running + 0.1*batch

// Exponential-moving-average buffers a batch-norm layer keeps across steps.
// The running variance is stored unbiased (batch var scaled by m/(m-1)).
struct BatchNormStats {
  std::vector<float> mean;
  std::vector<float> var;

  explicit BatchNormStats(int channels = 0)
      : mean(static_cast<size_t>(channels), 0.0f), var(static_cast<size_t>(channels), 1.0f) {}
  bool operator==(const BatchNormStats&) const = default;
};

// Records one forward pass as a list of nodes, then walks it in reverse.
// Gradients accumulate additively where a value fans out to several consumers.
// All kernels are single threaded and run in a fixed order, so two replays of
// the same program produce bit-identical values and gradients.
class Tape {
 public:
  using NodeId = int;

  // registers an external tensor as a leaf; after backward(), its gradient
  // (if requires_grad is set) lands in the tensor's grad buffer
  NodeId watch(Tensor& leaf);
  // tape-owned constant leaf
  NodeId constant(Tensor value);

  // input [N,Cin,H,W] (cross-correlation, no bias), weight [Cout,Cin,kh,kw],
  // kh/kw in {1,3,7}, stride in {1,2}; output extent floor((H+2p-k)/s)+1
  NodeId conv2d(NodeId input, NodeId weight, int stride, int padding);
  // input [N,C,H,W], gamma/beta [C]; train mode normalizes by batch statistics
  // and updates *running, eval mode normalizes by *running
  NodeId batch_norm(NodeId input, NodeId gamma, NodeId beta, BatchNormStats* running, Mode mode,
                    float eps = kBnEps);
  NodeId relu(NodeId input);
  // all inputs [N,Ci,H,W] with equal N,H,W; concatenates along channels in order
  NodeId concat_channels(const std::vector<NodeId>& inputs);
  NodeId add(NodeId a, NodeId b);
  // window == stride and extents divisible by stride (the only shape used here)
  NodeId avg_pool2d(NodeId input, int window, int stride);
  // padding cells never win the max; ties go to the first candidate in
  // row-major window order
  NodeId max_pool2d(NodeId input, int window, int stride, int padding);
  // [N,C,H,W] -> [N,C]
  NodeId global_avg_pool(NodeId input);
  // input [N,F], weight [K,F], bias [K] -> [N,K]
  NodeId linear(NodeId input, NodeId weight, NodeId bias);
  // inverted dropout: train mode zeroes with probability `rate` and scales
  // kept entries by 1/(1-rate); eval mode and rate 0 are the identity
  NodeId dropout(NodeId input, double rate, Mode mode, RngStream& rng);
  // logits [N,K], labels[i] in [0,K); scalar mean loss with the max-subtraction
  // stabilization; gradient is (softmax - onehot)/N
  NodeId softmax_cross_entropy(NodeId logits, const std::vector<int>& labels);

  // seeds d(loss)/d(loss) = 1 and runs the recorded program in reverse
  void backward(NodeId loss);

  const Tensor& value(NodeId id) const;
  const std::vector<float>& grad(NodeId id) const;
  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  enum class Op {
    leaf,
    conv,
    bn,
    relu,
    concat,
    add,
    avg_pool,
    max_pool,
    global_pool,
    linear,
    dropout,
    softmax_ce,
  };

  struct ConvCtx {
    int stride = 1;
    int padding = 0;
  };
  struct BnCtx {
    Mode mode = Mode::train;
    float eps = kBnEps;
    std::vector<float> mean;     // statistics used for normalization
    std::vector<float> inv_std;  // 1/sqrt(var + eps)
  };
  struct AvgPoolCtx {
    int window = 2;
    int stride = 2;
  };
  struct MaxPoolCtx {
    int window = 3;
    int stride = 2;
    int padding = 1;
    std::vector<int32_t> argmax;  // flat input offset per output element
  };
  struct ConcatCtx {
    std::vector<int> widths;
  };
  struct DropoutCtx {
    std::vector<float> mask;  // entries are 0 or 1/(1-rate); empty means identity
  };
  struct CeCtx {
    std::vector<float> probs;  // softmax, row major [N,K]
    std::vector<int> labels;
  };
  using Ctx = std::variant<std::monostate, ConvCtx, BnCtx, AvgPoolCtx, MaxPoolCtx, ConcatCtx, DropoutCtx, CeCtx>;

  struct Node {
    Op op = Op::leaf;
    std::vector<NodeId> inputs;
    Tensor value;
    std::vector<float> grad;  // allocated lazily during backward
    bool requires_grad = false;
    Tensor* external = nullptr;
    Ctx ctx;
  };

  NodeId push(Node node);
  Node& at(NodeId id);
  const Node& at(NodeId id) const;
  std::vector<float>& grad_buffer(NodeId id);
  void check_finite(NodeId id, const char* op_name) const;

  void backward_conv(Node& node);
  void backward_bn(Node& node);
  void backward_linear(Node& node);

  std::vector<Node> nodes_;
};

// standalone row-wise softmax of [N,K] logits, max-subtracted
Tensor softmax(const Tensor& logits);

// convenience wrapper over the tape op: returns (mean loss, dloss/dlogits)
std::pair<float, Tensor> softmax_cross_entropy_with_grad(const Tensor& logits, const std::vector<int>& labels);

}  // namespace densekit
