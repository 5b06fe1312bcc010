#pragma once

#include <cstdint>
#include <string_view>

namespace densekit {

// Deterministic splitmix64 stream addressed by (master seed, name, index0, index1).
// Streams with different addresses are independent; the same address always
// replays the same sequence, which is what makes shuffles, crops, and dropout
// masks reproducible after a resume without serializing generator state.
class RngStream {
 public:
  RngStream(uint64_t seed, std::string_view name, uint64_t index0 = 0, uint64_t index1 = 0);

  uint64_t next_u64();
  // uniform in [0, 1)
  double next_double();
  float next_float();
  // unbiased uniform integer in [0, n), n > 0
  uint32_t next_below(uint32_t n);
  // standard normal via Box-Muller, computed in double, returned as float
  float next_normal();

 private:
  uint64_t state_ = 0;
  float cached_normal_ = 0.0f;
  bool has_cached_normal_ = false;
};

}  // namespace densekit
