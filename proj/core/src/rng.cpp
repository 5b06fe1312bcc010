#include "densekit/rng.hpp"

#include <cmath>

#include "densekit/errors.hpp"

namespace densekit {
namespace {

// splitmix64 output function, also used as a stateless mixer
uint64_t mix64(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

uint64_t splitmix64(uint64_t& x) {
  x += 0x9E3779B97F4A7C15ull;
  return mix64(x);
}

uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace

RngStream::RngStream(uint64_t seed, std::string_view name, uint64_t index0, uint64_t index1) {
  // cascade every address component through the mixer so each one avalanches
  uint64_t x = mix64(seed ^ fnv1a64(name));
  x = mix64(x + index0 * 0xD6E8FEB86659FD93ull + 1);
  x = mix64(x + index1 * 0xA5A5B9E97F4A7C15ull + 1);
  state_ = x;
}

uint64_t RngStream::next_u64() { return splitmix64(state_); }

double RngStream::next_double() {
  // top 53 bits -> [0, 1)
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

float RngStream::next_float() {
  return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f;
}

uint32_t RngStream::next_below(uint32_t n) {
  if (n == 0) throw UsageError("RngStream::next_below: n must be positive");
  // rejection sampling over the largest multiple of n that fits in 32 bits
  uint32_t limit = UINT32_MAX - (UINT32_MAX % n + 1) % n;
  for (;;) {
    uint32_t v = static_cast<uint32_t>(next_u64() >> 32);
    if (v <= limit) return v % n;
  }
}

float RngStream::next_normal() {
  if (has_cached_normal_) {
    has_cached_normal_ = false;
    return cached_normal_;
  }
  double u1 = 0.0;
  do {
    u1 = next_double();
  } while (u1 <= 0.0);
  double u2 = next_double();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * M_PI * u2;
  cached_normal_ = static_cast<float>(r * std::sin(theta));
  has_cached_normal_ = true;
  return static_cast<float>(r * std::cos(theta));
}

}  // namespace densekit
