#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "densekit/rng.hpp"

namespace densekit {

// Dense row-major float32 array with an optional gradient buffer of the same
// shape. Rank is small (1, 2, or 4 in practice); extents are ints on purpose,
// element counts are 64-bit.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<float> data);

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, float value);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const;
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& buffer() { return data_; }
  const std::vector<float>& buffer() const { return data_; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool v) { requires_grad_ = v; }

  bool has_grad() const { return grad_.has_value(); }
  // allocates a zero-filled gradient on first touch
  std::vector<float>& grad();
  const std::vector<float>& grad() const;
  void zero_grad();
  void drop_grad() { grad_.reset(); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_str() const;

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
  std::optional<std::vector<float>> grad_;
  bool requires_grad_ = false;
};

int64_t shape_numel(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

// fills from the given stream in flat index order
Tensor random_uniform(std::vector<int> shape, RngStream& rng, float lo = 0.0f, float hi = 1.0f);
Tensor random_normal(std::vector<int> shape, RngStream& rng, float stddev = 1.0f);

}  // namespace densekit
