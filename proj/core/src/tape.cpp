#include "densekit/tape.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "densekit/errors.hpp"

namespace densekit {
namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// samples folded into one im2col+GEMM call; fixed so summation order never
// depends on batch size or anything else
constexpr int kConvChunk = 8;

int conv_out_extent(int in, int k, int stride, int padding) {
  return (in + 2 * padding - k) / stride + 1;
}

[[maybe_unused]] bool is_finite(float v) { return std::isfinite(v); }

// col is [Cin*kh*kw, chunk*Hout*Wout]; column index = n_local*(Hout*Wout) + ho*Wout + wo
void im2col_chunk(const float* x, int n0, int chunk, int Cin, int H, int W, int kh, int kw, int stride,
                  int padding, int Hout, int Wout, float* col) {
  const int64_t howo = static_cast<int64_t>(Hout) * Wout;
  const int64_t cols = static_cast<int64_t>(chunk) * howo;
  for (int ci = 0; ci < Cin; ++ci) {
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v) {
        float* row = col + (static_cast<int64_t>(ci) * kh * kw + u * kw + v) * cols;
        for (int nl = 0; nl < chunk; ++nl) {
          const float* xs = x + (static_cast<int64_t>(n0 + nl) * Cin + ci) * H * W;
          float* dst = row + nl * howo;
          for (int ho = 0; ho < Hout; ++ho, dst += Wout) {
            const int hi = ho * stride - padding + u;
            if (hi < 0 || hi >= H) {
              std::fill(dst, dst + Wout, 0.0f);
              continue;
            }
            const float* xrow = xs + static_cast<int64_t>(hi) * W;
            for (int wo = 0; wo < Wout; ++wo) {
              const int wi = wo * stride - padding + v;
              dst[wo] = (wi >= 0 && wi < W) ? xrow[wi] : 0.0f;
            }
          }
        }
      }
    }
  }
}

// scatter-add of a column gradient back onto the input, reverse of im2col_chunk
void col2im_chunk(const float* col, int n0, int chunk, int Cin, int H, int W, int kh, int kw, int stride,
                  int padding, int Hout, int Wout, float* dx) {
  const int64_t howo = static_cast<int64_t>(Hout) * Wout;
  const int64_t cols = static_cast<int64_t>(chunk) * howo;
  for (int ci = 0; ci < Cin; ++ci) {
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v) {
        const float* row = col + (static_cast<int64_t>(ci) * kh * kw + u * kw + v) * cols;
        for (int nl = 0; nl < chunk; ++nl) {
          float* dxs = dx + (static_cast<int64_t>(n0 + nl) * Cin + ci) * H * W;
          const float* src = row + nl * howo;
          for (int ho = 0; ho < Hout; ++ho, src += Wout) {
            const int hi = ho * stride - padding + u;
            if (hi < 0 || hi >= H) continue;
            float* dxrow = dxs + static_cast<int64_t>(hi) * W;
            for (int wo = 0; wo < Wout; ++wo) {
              const int wi = wo * stride - padding + v;
              if (wi >= 0 && wi < W) dxrow[wi] += src[wo];
            }
          }
        }
      }
    }
  }
}

void require_rank4(const Tensor& t, const char* op, const char* which) {
  if (t.rank() != 4) {
    throw ConfigError(std::string(op) + ": " + which + " must be rank 4, got " + t.shape_str());
  }
}

}  // namespace

Tape::NodeId Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return static_cast<NodeId>(nodes_.size() - 1);
}

Tape::Node& Tape::at(NodeId id) {
  if (id < 0 || id >= size()) throw UsageError("tape node id " + std::to_string(id) + " out of range");
  return nodes_[static_cast<size_t>(id)];
}

const Tape::Node& Tape::at(NodeId id) const {
  if (id < 0 || id >= size()) throw UsageError("tape node id " + std::to_string(id) + " out of range");
  return nodes_[static_cast<size_t>(id)];
}

std::vector<float>& Tape::grad_buffer(NodeId id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.empty()) n.grad.assign(static_cast<size_t>(n.value.numel()), 0.0f);
  return n.grad;
}

void Tape::check_finite(NodeId id, const char* op_name) const {
#ifndef NDEBUG
  const Tensor& v = at(id).value;
  for (int64_t i = 0; i < v.numel(); ++i) {
    if (!is_finite(v.data()[i])) {
      throw InternalError(std::string(op_name) + " produced a non-finite value at flat index " + std::to_string(i));
    }
  }
#else
  (void)id;
  (void)op_name;
#endif
}

Tape::NodeId Tape::watch(Tensor& leaf) {
  Node n;
  n.op = Op::leaf;
  n.value = leaf;
  n.requires_grad = leaf.requires_grad();
  n.external = &leaf;
  return push(std::move(n));
}

Tape::NodeId Tape::constant(Tensor value) {
  Node n;
  n.op = Op::leaf;
  n.value = std::move(value);
  return push(std::move(n));
}

Tape::NodeId Tape::conv2d(NodeId input, NodeId weight, int stride, int padding) {
  const Tensor& x = at(input).value;
  const Tensor& w = at(weight).value;
  require_rank4(x, "conv2d", "input");
  require_rank4(w, "conv2d", "weight");
  const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != Cin) {
    throw ConfigError("conv2d: input has " + std::to_string(Cin) + " channels but weight expects " +
                      std::to_string(w.dim(1)) + " (input " + x.shape_str() + ", weight " + w.shape_str() + ")");
  }
  auto kernel_ok = [](int k) { return k == 1 || k == 3 || k == 7; };
  if (!kernel_ok(kh) || !kernel_ok(kw)) {
    throw ConfigError("conv2d: kernel extents must be 1, 3, or 7, got " + w.shape_str());
  }
  if (stride != 1 && stride != 2) throw ConfigError("conv2d: stride must be 1 or 2, got " + std::to_string(stride));
  if (padding < 0) throw ConfigError("conv2d: padding must be non-negative, got " + std::to_string(padding));
  const int Hout = conv_out_extent(H, kh, stride, padding);
  const int Wout = conv_out_extent(W, kw, stride, padding);
  if (Hout <= 0 || Wout <= 0) {
    throw ConfigError("conv2d: output extent would be empty for input " + x.shape_str() + ", kernel " +
                      w.shape_str() + ", stride " + std::to_string(stride) + ", padding " + std::to_string(padding));
  }

  Node n;
  n.op = Op::conv;
  n.inputs = {input, weight};
  n.requires_grad = at(input).requires_grad || at(weight).requires_grad;
  n.ctx = ConvCtx{stride, padding};
  n.value = Tensor({N, Cout, Hout, Wout});

  const int64_t howo = static_cast<int64_t>(Hout) * Wout;
  const int ckk = Cin * kh * kw;
  Eigen::Map<const RowMat> wmat(w.data(), Cout, ckk);
  std::vector<float> col;
  std::vector<float> gemm_out;
  for (int n0 = 0; n0 < N; n0 += kConvChunk) {
    const int chunk = std::min(kConvChunk, N - n0);
    const int64_t cols = chunk * howo;
    col.resize(static_cast<size_t>(ckk) * cols);
    gemm_out.resize(static_cast<size_t>(Cout) * cols);
    im2col_chunk(x.data(), n0, chunk, Cin, H, W, kh, kw, stride, padding, Hout, Wout, col.data());
    Eigen::Map<const RowMat> cmat(col.data(), ckk, cols);
    Eigen::Map<RowMat> omat(gemm_out.data(), Cout, cols);
    omat.noalias() = wmat * cmat;
    for (int co = 0; co < Cout; ++co) {
      for (int nl = 0; nl < chunk; ++nl) {
        std::memcpy(n.value.data() + ((static_cast<int64_t>(n0 + nl) * Cout + co) * howo),
                    gemm_out.data() + (static_cast<int64_t>(co) * cols + nl * howo), sizeof(float) * howo);
      }
    }
  }
  NodeId id = push(std::move(n));
  check_finite(id, "conv2d");
  return id;
}

Tape::NodeId Tape::batch_norm(NodeId input, NodeId gamma, NodeId beta, BatchNormStats* running, Mode mode,
                              float eps) {
  const Tensor& x = at(input).value;
  const Tensor& g = at(gamma).value;
  const Tensor& b = at(beta).value;
  require_rank4(x, "batch_norm", "input");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (g.rank() != 1 || g.dim(0) != C || b.rank() != 1 || b.dim(0) != C) {
    throw ConfigError("batch_norm: gamma " + g.shape_str() + " / beta " + b.shape_str() + " must both be [" +
                      std::to_string(C) + "] for input " + x.shape_str());
  }
  if (running == nullptr) throw UsageError("batch_norm: running statistics buffer is required");
  if (running->mean.size() != static_cast<size_t>(C) || running->var.size() != static_cast<size_t>(C)) {
    throw ConfigError("batch_norm: running statistics hold " + std::to_string(running->mean.size()) +
                      " channels, input has " + std::to_string(C));
  }
  const int64_t m = static_cast<int64_t>(N) * H * W;
  if (mode == Mode::train && m < 2) {
    throw ConfigError("batch_norm: training needs at least 2 values per channel, got " + std::to_string(m));
  }

  Node n;
  n.op = Op::bn;
  n.inputs = {input, gamma, beta};
  n.requires_grad = at(input).requires_grad || at(gamma).requires_grad || at(beta).requires_grad;
  n.value = Tensor({N, C, H, W});
  BnCtx ctx;
  ctx.mode = mode;
  ctx.eps = eps;
  ctx.mean.resize(static_cast<size_t>(C));
  ctx.inv_std.resize(static_cast<size_t>(C));

  const int64_t hw = static_cast<int64_t>(H) * W;
  for (int c = 0; c < C; ++c) {
    float mean_c = 0.0f, var_c = 0.0f;
    if (mode == Mode::train) {
      double sum = 0.0, sum_sq = 0.0;
      for (int ni = 0; ni < N; ++ni) {
        const float* xs = x.data() + (static_cast<int64_t>(ni) * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          const double v = xs[i];
          sum += v;
          sum_sq += v * v;
        }
      }
      const double mean_d = sum / static_cast<double>(m);
      double var_d = sum_sq / static_cast<double>(m) - mean_d * mean_d;
      if (var_d < 0.0) var_d = 0.0;  // guard tiny negative from cancellation
      mean_c = static_cast<float>(mean_d);
      var_c = static_cast<float>(var_d);
      const float unbiased = var_c * (static_cast<float>(m) / static_cast<float>(m - 1));
      running->mean[c] = kBnMomentum * running->mean[c] + (1.0f - kBnMomentum) * mean_c;
      running->var[c] = kBnMomentum * running->var[c] + (1.0f - kBnMomentum) * unbiased;
    } else {
      mean_c = running->mean[c];
      var_c = running->var[c];
    }
    ctx.mean[c] = mean_c;
    ctx.inv_std[c] = 1.0f / std::sqrt(var_c + eps);
    const float scale = g.data()[c] * ctx.inv_std[c];
    const float shift = b.data()[c] - scale * mean_c;
    for (int ni = 0; ni < N; ++ni) {
      const float* xs = x.data() + (static_cast<int64_t>(ni) * C + c) * hw;
      float* ys = n.value.data() + (static_cast<int64_t>(ni) * C + c) * hw;
      for (int64_t i = 0; i < hw; ++i) ys[i] = xs[i] * scale + shift;
    }
  }
  n.ctx = std::move(ctx);
  NodeId id = push(std::move(n));
  check_finite(id, "batch_norm");
  return id;
}

Tape::NodeId Tape::relu(NodeId input) {
  const Tensor& x = at(input).value;
  Node n;
  n.op = Op::relu;
  n.inputs = {input};
  n.requires_grad = at(input).requires_grad;
  n.value = Tensor(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) n.value.data()[i] = x.data()[i] > 0.0f ? x.data()[i] : 0.0f;
  return push(std::move(n));
}

Tape::NodeId Tape::concat_channels(const std::vector<NodeId>& inputs) {
  if (inputs.empty()) throw UsageError("concat_channels: needs at least one input");
  const Tensor& first = at(inputs[0]).value;
  require_rank4(first, "concat_channels", "input 0");
  const int N = first.dim(0), H = first.dim(2), W = first.dim(3);
  ConcatCtx ctx;
  int total_c = 0;
  bool req = false;
  for (size_t i = 0; i < inputs.size(); ++i) {
    const Tensor& t = at(inputs[i]).value;
    if (t.rank() != 4 || t.dim(0) != N || t.dim(2) != H || t.dim(3) != W) {
      throw ConfigError("concat_channels: input " + std::to_string(i) + " has shape " + t.shape_str() +
                        ", expected [" + std::to_string(N) + ",C," + std::to_string(H) + "," + std::to_string(W) +
                        "]");
    }
    ctx.widths.push_back(t.dim(1));
    total_c += t.dim(1);
    req = req || at(inputs[i]).requires_grad;
  }

  Node n;
  n.op = Op::concat;
  n.inputs = inputs;
  n.requires_grad = req;
  n.value = Tensor({N, total_c, H, W});
  const int64_t hw = static_cast<int64_t>(H) * W;
  for (int ni = 0; ni < N; ++ni) {
    int offset = 0;
    for (size_t i = 0; i < inputs.size(); ++i) {
      const Tensor& t = at(inputs[i]).value;
      const int ci = ctx.widths[i];
      std::memcpy(n.value.data() + (static_cast<int64_t>(ni) * total_c + offset) * hw,
                  t.data() + static_cast<int64_t>(ni) * ci * hw, sizeof(float) * ci * hw);
      offset += ci;
    }
  }
  n.ctx = std::move(ctx);
  return push(std::move(n));
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
  const Tensor& ta = at(a).value;
  const Tensor& tb = at(b).value;
  if (!ta.same_shape(tb)) {
    throw ConfigError("add: shapes " + ta.shape_str() + " and " + tb.shape_str() + " differ");
  }
  Node n;
  n.op = Op::add;
  n.inputs = {a, b};
  n.requires_grad = at(a).requires_grad || at(b).requires_grad;
  n.value = Tensor(ta.shape());
  for (int64_t i = 0; i < ta.numel(); ++i) n.value.data()[i] = ta.data()[i] + tb.data()[i];
  return push(std::move(n));
}

Tape::NodeId Tape::avg_pool2d(NodeId input, int window, int stride) {
  const Tensor& x = at(input).value;
  require_rank4(x, "avg_pool2d", "input");
  if (window != stride) {
    throw ConfigError("avg_pool2d: only window == stride is supported, got window " + std::to_string(window) +
                      ", stride " + std::to_string(stride));
  }
  if (window <= 0) throw ConfigError("avg_pool2d: window must be positive");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % stride != 0 || W % stride != 0) {
    throw ConfigError("avg_pool2d: input " + x.shape_str() + " is not divisible by stride " + std::to_string(stride));
  }
  const int Hout = H / stride, Wout = W / stride;

  Node n;
  n.op = Op::avg_pool;
  n.inputs = {input};
  n.requires_grad = at(input).requires_grad;
  n.ctx = AvgPoolCtx{window, stride};
  n.value = Tensor({N, C, Hout, Wout});
  const float inv = 1.0f / static_cast<float>(window * window);
  for (int ni = 0; ni < N; ++ni) {
    for (int c = 0; c < C; ++c) {
      const float* xs = x.data() + (static_cast<int64_t>(ni) * C + c) * H * W;
      float* ys = n.value.data() + (static_cast<int64_t>(ni) * C + c) * Hout * Wout;
      for (int ho = 0; ho < Hout; ++ho) {
        for (int wo = 0; wo < Wout; ++wo) {
          float s = 0.0f;
          for (int u = 0; u < window; ++u) {
            const float* xrow = xs + static_cast<int64_t>(ho * stride + u) * W + wo * stride;
            for (int v = 0; v < window; ++v) s += xrow[v];
          }
          ys[static_cast<int64_t>(ho) * Wout + wo] = s * inv;
        }
      }
    }
  }
  return push(std::move(n));
}

Tape::NodeId Tape::max_pool2d(NodeId input, int window, int stride, int padding) {
  const Tensor& x = at(input).value;
  require_rank4(x, "max_pool2d", "input");
  if (window <= 0 || stride <= 0 || padding < 0) {
    throw ConfigError("max_pool2d: bad window/stride/padding " + std::to_string(window) + "/" +
                      std::to_string(stride) + "/" + std::to_string(padding));
  }
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Hout = conv_out_extent(H, window, stride, padding);
  const int Wout = conv_out_extent(W, window, stride, padding);
  if (Hout <= 0 || Wout <= 0) throw ConfigError("max_pool2d: output extent would be empty for " + x.shape_str());
  if (x.numel() > std::numeric_limits<int32_t>::max()) throw UsageError("max_pool2d: input too large to index");

  Node n;
  n.op = Op::max_pool;
  n.inputs = {input};
  n.requires_grad = at(input).requires_grad;
  n.value = Tensor({N, C, Hout, Wout});
  MaxPoolCtx ctx{window, stride, padding, {}};
  ctx.argmax.assign(static_cast<size_t>(n.value.numel()), -1);
  int64_t o = 0;
  for (int ni = 0; ni < N; ++ni) {
    for (int c = 0; c < C; ++c) {
      const int64_t plane = (static_cast<int64_t>(ni) * C + c) * H * W;
      const float* xs = x.data() + plane;
      for (int ho = 0; ho < Hout; ++ho) {
        for (int wo = 0; wo < Wout; ++wo, ++o) {
          float best = -std::numeric_limits<float>::infinity();
          int32_t best_idx = -1;
          for (int u = 0; u < window; ++u) {
            const int hi = ho * stride - padding + u;
            if (hi < 0 || hi >= H) continue;
            for (int v = 0; v < window; ++v) {
              const int wi = wo * stride - padding + v;
              if (wi < 0 || wi >= W) continue;
              const float val = xs[static_cast<int64_t>(hi) * W + wi];
              // strict > keeps the first candidate on ties
              if (val > best) {
                best = val;
                best_idx = static_cast<int32_t>(plane + hi * W + wi);
              }
            }
          }
          if (best_idx < 0) throw InternalError("max_pool2d: window covered only padding");
          n.value.data()[o] = best;
          ctx.argmax[static_cast<size_t>(o)] = best_idx;
        }
      }
    }
  }
  n.ctx = std::move(ctx);
  return push(std::move(n));
}

Tape::NodeId Tape::global_avg_pool(NodeId input) {
  const Tensor& x = at(input).value;
  require_rank4(x, "global_avg_pool", "input");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Node n;
  n.op = Op::global_pool;
  n.inputs = {input};
  n.requires_grad = at(input).requires_grad;
  n.value = Tensor({N, C});
  const int64_t hw = static_cast<int64_t>(H) * W;
  for (int ni = 0; ni < N; ++ni) {
    for (int c = 0; c < C; ++c) {
      const float* xs = x.data() + (static_cast<int64_t>(ni) * C + c) * hw;
      double s = 0.0;
      for (int64_t i = 0; i < hw; ++i) s += xs[i];
      n.value.data()[static_cast<int64_t>(ni) * C + c] = static_cast<float>(s / static_cast<double>(hw));
    }
  }
  return push(std::move(n));
}

Tape::NodeId Tape::linear(NodeId input, NodeId weight, NodeId bias) {
  const Tensor& x = at(input).value;
  const Tensor& w = at(weight).value;
  const Tensor& b = at(bias).value;
  if (x.rank() != 2) throw ConfigError("linear: input must be rank 2, got " + x.shape_str());
  if (w.rank() != 2) throw ConfigError("linear: weight must be rank 2, got " + w.shape_str());
  const int N = x.dim(0), F = x.dim(1), K = w.dim(0);
  if (w.dim(1) != F) {
    throw ConfigError("linear: input features " + std::to_string(F) + " do not match weight " + w.shape_str());
  }
  if (b.rank() != 1 || b.dim(0) != K) {
    throw ConfigError("linear: bias " + b.shape_str() + " must be [" + std::to_string(K) + "]");
  }

  Node n;
  n.op = Op::linear;
  n.inputs = {input, weight, bias};
  n.requires_grad = at(input).requires_grad || at(weight).requires_grad || at(bias).requires_grad;
  n.value = Tensor({N, K});
  Eigen::Map<const RowMat> xm(x.data(), N, F);
  Eigen::Map<const RowMat> wm(w.data(), K, F);
  Eigen::Map<RowMat> om(n.value.data(), N, K);
  om.noalias() = xm * wm.transpose();
  for (int ni = 0; ni < N; ++ni) {
    float* row = n.value.data() + static_cast<int64_t>(ni) * K;
    for (int k = 0; k < K; ++k) row[k] += b.data()[k];
  }
  NodeId id = push(std::move(n));
  check_finite(id, "linear");
  return id;
}

Tape::NodeId Tape::dropout(NodeId input, double rate, Mode mode, RngStream& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  }
  const Tensor& x = at(input).value;
  Node n;
  n.op = Op::dropout;
  n.inputs = {input};
  n.requires_grad = at(input).requires_grad;
  n.value = Tensor(x.shape());
  DropoutCtx ctx;
  if (mode == Mode::eval || rate == 0.0) {
    std::memcpy(n.value.data(), x.data(), sizeof(float) * static_cast<size_t>(x.numel()));
  } else {
    const float scale = static_cast<float>(1.0 / (1.0 - rate));
    ctx.mask.resize(static_cast<size_t>(x.numel()));
    for (int64_t i = 0; i < x.numel(); ++i) {
      const float m = rng.next_double() < rate ? 0.0f : scale;
      ctx.mask[static_cast<size_t>(i)] = m;
      n.value.data()[i] = x.data()[i] * m;
    }
  }
  n.ctx = std::move(ctx);
  return push(std::move(n));
}

Tape::NodeId Tape::softmax_cross_entropy(NodeId logits, const std::vector<int>& labels) {
  const Tensor& x = at(logits).value;
  if (x.rank() != 2) throw ConfigError("softmax_cross_entropy: logits must be rank 2, got " + x.shape_str());
  const int N = x.dim(0), K = x.dim(1);
  if (static_cast<int>(labels.size()) != N) {
    throw UsageError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(N) +
                     " rows");
  }
  CeCtx ctx;
  ctx.labels = labels;
  ctx.probs.resize(static_cast<size_t>(N) * K);
  double total = 0.0;
  for (int ni = 0; ni < N; ++ni) {
    const int y = labels[static_cast<size_t>(ni)];
    if (y < 0 || y >= K) {
      throw DataError("softmax_cross_entropy: label " + std::to_string(y) + " out of range [0," + std::to_string(K) +
                      ") at record " + std::to_string(ni));
    }
    const float* row = x.data() + static_cast<int64_t>(ni) * K;
    float mx = row[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double sum = 0.0;
    for (int k = 0; k < K; ++k) sum += std::exp(static_cast<double>(row[k]) - mx);
    float* p = ctx.probs.data() + static_cast<int64_t>(ni) * K;
    for (int k = 0; k < K; ++k) {
      p[k] = static_cast<float>(std::exp(static_cast<double>(row[k]) - mx) / sum);
    }
    total += -(static_cast<double>(row[y]) - mx - std::log(sum));
  }

  Node n;
  n.op = Op::softmax_ce;
  n.inputs = {logits};
  n.requires_grad = at(logits).requires_grad;
  n.value = Tensor({1}, {static_cast<float>(total / N)});
  n.ctx = std::move(ctx);
  NodeId id = push(std::move(n));
  check_finite(id, "softmax_cross_entropy");
  return id;
}

void Tape::backward_conv(Node& node) {
  const Node& xin = at(node.inputs[0]);
  const Node& win = at(node.inputs[1]);
  const Tensor& x = xin.value;
  const Tensor& w = win.value;
  const ConvCtx& ctx = std::get<ConvCtx>(node.ctx);
  const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int Hout = node.value.dim(2), Wout = node.value.dim(3);
  const int64_t howo = static_cast<int64_t>(Hout) * Wout;
  const int ckk = Cin * kh * kw;

  const bool want_dx = xin.requires_grad;
  const bool want_dw = win.requires_grad;
  if (!want_dx && !want_dw) return;
  float* dx = want_dx ? grad_buffer(node.inputs[0]).data() : nullptr;
  float* dw = want_dw ? grad_buffer(node.inputs[1]).data() : nullptr;

  Eigen::Map<const RowMat> wmat(w.data(), Cout, ckk);
  std::vector<float> col;
  std::vector<float> gout;   // gathered upstream gradient [Cout, chunk*howo]
  std::vector<float> dcol;   // column gradient [ckk, chunk*howo]
  for (int n0 = 0; n0 < N; n0 += kConvChunk) {
    const int chunk = std::min(kConvChunk, N - n0);
    const int64_t cols = chunk * howo;
    gout.resize(static_cast<size_t>(Cout) * cols);
    for (int co = 0; co < Cout; ++co) {
      for (int nl = 0; nl < chunk; ++nl) {
        std::memcpy(gout.data() + (static_cast<int64_t>(co) * cols + nl * howo),
                    node.grad.data() + ((static_cast<int64_t>(n0 + nl) * Cout + co) * howo), sizeof(float) * howo);
      }
    }
    Eigen::Map<const RowMat> gmat(gout.data(), Cout, cols);
    if (want_dw) {
      col.resize(static_cast<size_t>(ckk) * cols);
      im2col_chunk(x.data(), n0, chunk, Cin, H, W, kh, kw, ctx.stride, ctx.padding, Hout, Wout, col.data());
      Eigen::Map<const RowMat> cmat(col.data(), ckk, cols);
      Eigen::Map<RowMat> dwmat(dw, Cout, ckk);
      dwmat.noalias() += gmat * cmat.transpose();
    }
    if (want_dx) {
      dcol.resize(static_cast<size_t>(ckk) * cols);
      Eigen::Map<RowMat> dcmat(dcol.data(), ckk, cols);
      dcmat.noalias() = wmat.transpose() * gmat;
      col2im_chunk(dcol.data(), n0, chunk, Cin, H, W, kh, kw, ctx.stride, ctx.padding, Hout, Wout, dx);
    }
  }
}

void Tape::backward_bn(Node& node) {
  const Node& xin = at(node.inputs[0]);
  const Node& gin = at(node.inputs[1]);
  const Node& bin = at(node.inputs[2]);
  const Tensor& x = xin.value;
  const BnCtx& ctx = std::get<BnCtx>(node.ctx);
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t hw = static_cast<int64_t>(H) * W;
  const int64_t m = static_cast<int64_t>(N) * hw;

  const bool want_dx = xin.requires_grad;
  const bool want_dg = gin.requires_grad;
  const bool want_db = bin.requires_grad;
  if (!want_dx && !want_dg && !want_db) return;
  float* dx = want_dx ? grad_buffer(node.inputs[0]).data() : nullptr;
  float* dg = want_dg ? grad_buffer(node.inputs[1]).data() : nullptr;
  float* db = want_db ? grad_buffer(node.inputs[2]).data() : nullptr;
  const float* dy = node.grad.data();
  const float* gamma = gin.value.data();

  for (int c = 0; c < C; ++c) {
    const float mean_c = ctx.mean[c];
    const float istd = ctx.inv_std[c];
    double s1 = 0.0, s2 = 0.0;  // sum(dy), sum(dy * xhat)
    for (int ni = 0; ni < N; ++ni) {
      const int64_t base = (static_cast<int64_t>(ni) * C + c) * hw;
      const float* xs = x.data() + base;
      const float* dys = dy + base;
      for (int64_t i = 0; i < hw; ++i) {
        const double xhat = (static_cast<double>(xs[i]) - mean_c) * istd;
        s1 += dys[i];
        s2 += dys[i] * xhat;
      }
    }
    if (want_dg) dg[c] += static_cast<float>(s2);
    if (want_db) db[c] += static_cast<float>(s1);
    if (!want_dx) continue;
    const float scale = gamma[c] * istd;
    if (ctx.mode == Mode::train) {
      const float a = static_cast<float>(s1 / static_cast<double>(m));
      const float b = static_cast<float>(s2 / static_cast<double>(m));
      for (int ni = 0; ni < N; ++ni) {
        const int64_t base = (static_cast<int64_t>(ni) * C + c) * hw;
        const float* xs = x.data() + base;
        const float* dys = dy + base;
        float* dxs = dx + base;
        for (int64_t i = 0; i < hw; ++i) {
          const float xhat = (xs[i] - mean_c) * istd;
          dxs[i] += scale * (dys[i] - a - xhat * b);
        }
      }
    } else {
      for (int ni = 0; ni < N; ++ni) {
        const int64_t base = (static_cast<int64_t>(ni) * C + c) * hw;
        const float* dys = dy + base;
        float* dxs = dx + base;
        for (int64_t i = 0; i < hw; ++i) dxs[i] += scale * dys[i];
      }
    }
  }
}

void Tape::backward_linear(Node& node) {
  const Node& xin = at(node.inputs[0]);
  const Node& win = at(node.inputs[1]);
  const Node& bin = at(node.inputs[2]);
  const Tensor& x = xin.value;
  const Tensor& w = win.value;
  const int N = x.dim(0), F = x.dim(1), K = w.dim(0);
  Eigen::Map<const RowMat> gmat(node.grad.data(), N, K);
  if (xin.requires_grad) {
    Eigen::Map<RowMat> dxm(grad_buffer(node.inputs[0]).data(), N, F);
    Eigen::Map<const RowMat> wm(w.data(), K, F);
    dxm.noalias() += gmat * wm;
  }
  if (win.requires_grad) {
    Eigen::Map<RowMat> dwm(grad_buffer(node.inputs[1]).data(), K, F);
    Eigen::Map<const RowMat> xm(x.data(), N, F);
    dwm.noalias() += gmat.transpose() * xm;
  }
  if (bin.requires_grad) {
    float* dbp = grad_buffer(node.inputs[2]).data();
    for (int ni = 0; ni < N; ++ni) {
      const float* row = node.grad.data() + static_cast<int64_t>(ni) * K;
      for (int k = 0; k < K; ++k) dbp[k] += row[k];
    }
  }
}

void Tape::backward(NodeId loss) {
  Node& top = at(loss);
  if (top.value.numel() != 1) {
    throw UsageError("backward: loss must be a scalar, got " + top.value.shape_str());
  }
  // fresh gradients on every call
  for (Node& n : nodes_) n.grad.clear();
  grad_buffer(loss)[0] = 1.0f;

  for (NodeId id = loss; id >= 0; --id) {
    Node& node = nodes_[static_cast<size_t>(id)];
    if (node.grad.empty() || !node.requires_grad || node.op == Op::leaf) continue;
    switch (node.op) {
      case Op::conv:
        backward_conv(node);
        break;
      case Op::bn:
        backward_bn(node);
        break;
      case Op::linear:
        backward_linear(node);
        break;
      case Op::relu: {
        const Node& xin = at(node.inputs[0]);
        if (!xin.requires_grad) break;
        float* dx = grad_buffer(node.inputs[0]).data();
        const float* xv = xin.value.data();
        for (int64_t i = 0; i < xin.value.numel(); ++i) {
          if (xv[i] > 0.0f) dx[i] += node.grad[static_cast<size_t>(i)];
        }
        break;
      }
      case Op::concat: {
        const ConcatCtx& ctx = std::get<ConcatCtx>(node.ctx);
        const int N = node.value.dim(0), Cout = node.value.dim(1);
        const int64_t hw = static_cast<int64_t>(node.value.dim(2)) * node.value.dim(3);
        int offset = 0;
        for (size_t i = 0; i < node.inputs.size(); ++i) {
          const int ci = ctx.widths[i];
          if (at(node.inputs[i]).requires_grad) {
            float* dst = grad_buffer(node.inputs[i]).data();
            for (int ni = 0; ni < N; ++ni) {
              const float* src = node.grad.data() + (static_cast<int64_t>(ni) * Cout + offset) * hw;
              float* d = dst + static_cast<int64_t>(ni) * ci * hw;
              for (int64_t j = 0; j < ci * hw; ++j) d[j] += src[j];
            }
          }
          offset += ci;
        }
        break;
      }
      case Op::add: {
        for (int which = 0; which < 2; ++which) {
          if (!at(node.inputs[static_cast<size_t>(which)]).requires_grad) continue;
          float* d = grad_buffer(node.inputs[static_cast<size_t>(which)]).data();
          for (size_t i = 0; i < node.grad.size(); ++i) d[i] += node.grad[i];
        }
        break;
      }
      case Op::avg_pool: {
        if (!at(node.inputs[0]).requires_grad) break;
        const AvgPoolCtx& ctx = std::get<AvgPoolCtx>(node.ctx);
        const Tensor& x = at(node.inputs[0]).value;
        const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const int Hout = node.value.dim(2), Wout = node.value.dim(3);
        float* dx = grad_buffer(node.inputs[0]).data();
        const float inv = 1.0f / static_cast<float>(ctx.window * ctx.window);
        int64_t o = 0;
        for (int ni = 0; ni < N; ++ni) {
          for (int c = 0; c < C; ++c) {
            float* dxs = dx + (static_cast<int64_t>(ni) * C + c) * H * W;
            for (int ho = 0; ho < Hout; ++ho) {
              for (int wo = 0; wo < Wout; ++wo, ++o) {
                const float g = node.grad[static_cast<size_t>(o)] * inv;
                for (int u = 0; u < ctx.window; ++u) {
                  float* row = dxs + static_cast<int64_t>(ho * ctx.stride + u) * W + wo * ctx.stride;
                  for (int v = 0; v < ctx.window; ++v) row[v] += g;
                }
              }
            }
          }
        }
        break;
      }
      case Op::max_pool: {
        if (!at(node.inputs[0]).requires_grad) break;
        const MaxPoolCtx& ctx = std::get<MaxPoolCtx>(node.ctx);
        float* dx = grad_buffer(node.inputs[0]).data();
        for (size_t o = 0; o < ctx.argmax.size(); ++o) dx[ctx.argmax[o]] += node.grad[o];
        break;
      }
      case Op::global_pool: {
        if (!at(node.inputs[0]).requires_grad) break;
        const Tensor& x = at(node.inputs[0]).value;
        const int N = x.dim(0), C = x.dim(1);
        const int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
        float* dx = grad_buffer(node.inputs[0]).data();
        const float inv = 1.0f / static_cast<float>(hw);
        for (int ni = 0; ni < N; ++ni) {
          for (int c = 0; c < C; ++c) {
            const float g = node.grad[static_cast<size_t>(static_cast<int64_t>(ni) * C + c)] * inv;
            float* dxs = dx + (static_cast<int64_t>(ni) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) dxs[i] += g;
          }
        }
        break;
      }
      case Op::dropout: {
        if (!at(node.inputs[0]).requires_grad) break;
        const DropoutCtx& ctx = std::get<DropoutCtx>(node.ctx);
        float* dx = grad_buffer(node.inputs[0]).data();
        if (ctx.mask.empty()) {
          for (size_t i = 0; i < node.grad.size(); ++i) dx[i] += node.grad[i];
        } else {
          for (size_t i = 0; i < node.grad.size(); ++i) dx[i] += node.grad[i] * ctx.mask[i];
        }
        break;
      }
      case Op::softmax_ce: {
        if (!at(node.inputs[0]).requires_grad) break;
        const CeCtx& ctx = std::get<CeCtx>(node.ctx);
        const Tensor& logits = at(node.inputs[0]).value;
        const int N = logits.dim(0), K = logits.dim(1);
        float* dx = grad_buffer(node.inputs[0]).data();
        const float g = node.grad[0] / static_cast<float>(N);
        for (int ni = 0; ni < N; ++ni) {
          const float* p = ctx.probs.data() + static_cast<int64_t>(ni) * K;
          float* d = dx + static_cast<int64_t>(ni) * K;
          const int y = ctx.labels[static_cast<size_t>(ni)];
          for (int k = 0; k < K; ++k) d[k] += g * (p[k] - (k == y ? 1.0f : 0.0f));
        }
        break;
      }
      case Op::leaf:
        break;
    }
  }

  // hand leaf gradients back to their external tensors
  for (Node& n : nodes_) {
    if (n.op != Op::leaf || n.external == nullptr || !n.requires_grad) continue;
    std::vector<float>& out = n.external->grad();
    if (n.grad.empty()) {
      out.assign(static_cast<size_t>(n.value.numel()), 0.0f);
    } else {
      out = n.grad;
    }
  }
}

const Tensor& Tape::value(NodeId id) const { return at(id).value; }

const std::vector<float>& Tape::grad(NodeId id) const {
  const Node& n = at(id);
  if (n.grad.empty()) throw UsageError("tape node " + std::to_string(id) + " has no gradient (run backward first)");
  return n.grad;
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw ConfigError("softmax: logits must be rank 2, got " + logits.shape_str());
  const int N = logits.dim(0), K = logits.dim(1);
  Tensor out({N, K});
  for (int ni = 0; ni < N; ++ni) {
    const float* row = logits.data() + static_cast<int64_t>(ni) * K;
    float* p = out.data() + static_cast<int64_t>(ni) * K;
    float mx = row[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double sum = 0.0;
    for (int k = 0; k < K; ++k) sum += std::exp(static_cast<double>(row[k]) - mx);
    for (int k = 0; k < K; ++k) p[k] = static_cast<float>(std::exp(static_cast<double>(row[k]) - mx) / sum);
  }
  return out;
}

std::pair<float, Tensor> softmax_cross_entropy_with_grad(const Tensor& logits, const std::vector<int>& labels) {
  Tape tape;
  Tensor copy = logits;
  copy.set_requires_grad(true);
  Tape::NodeId in = tape.watch(copy);
  Tape::NodeId loss = tape.softmax_cross_entropy(in, labels);
  tape.backward(loss);
  return {tape.value(loss).data()[0], Tensor(logits.shape(), copy.grad())};
}

}  // namespace densekit
