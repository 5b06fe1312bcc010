#include "densekit/tensor.hpp"

#include <sstream>

#include "densekit/errors.hpp"

namespace densekit {

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ConfigError("tensor extent must be positive, got " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream out;
  out << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ",";
    out << shape[i];
  }
  out << "]";
  return out.str();
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0f);
}

Tensor::Tensor(std::vector<int> shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
    throw UsageError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                     shape_to_string(shape_));
  }
}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, float value) {
  Tensor t(std::move(shape));
  for (float& v : t.data_) v = value;
  return t;
}

int Tensor::dim(int i) const {
  if (i < 0 || i >= rank()) throw UsageError("tensor dim " + std::to_string(i) + " out of range for " + shape_str());
  return shape_[static_cast<size_t>(i)];
}

std::vector<float>& Tensor::grad() {
  if (!grad_) grad_.emplace(data_.size(), 0.0f);
  return *grad_;
}

const std::vector<float>& Tensor::grad() const {
  if (!grad_) throw UsageError("tensor has no gradient buffer");
  return *grad_;
}

void Tensor::zero_grad() {
  if (grad_) grad_->assign(data_.size(), 0.0f);
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

Tensor random_uniform(std::vector<int> shape, RngStream& rng, float lo, float hi) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = lo + (hi - lo) * rng.next_float();
  return t;
}

Tensor random_normal(std::vector<int> shape, RngStream& rng, float stddev) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = stddev * rng.next_normal();
  return t;
}

}  // namespace densekit
