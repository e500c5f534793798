// SPDX-License-Identifier: Apache-2.0
#ifndef L2S_RNG_HPP
#define L2S_RNG_HPP

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>

#include "l2s/common.hpp"

namespace l2s {

// Counter-based random stream. A draw is a pure function of
// (seed, stream label, draw index), so the same triple yields the same value
// on every platform. Child streams are derived by label and do not collide
// with the parent or with siblings in practice.
class RngStream {
 public:
  RngStream() : RngStream(0, "root") {}

  RngStream(uint64_t seed, std::string_view stream_id)
      : key_(mix64(mix64(seed) ^ fnv1a64(stream_id))), counter_(0) {}

  RngStream child(std::string_view label) const {
    RngStream c;
    c.key_ = mix64(key_ ^ fnv1a64(label));
    c.counter_ = 0;
    return c;
  }

  RngStream child(uint64_t index) const {
    RngStream c;
    c.key_ = mix64(key_ ^ mix64(index ^ 0xa5a5a5a5a5a5a5a5ull));
    c.counter_ = 0;
    return c;
  }

  // Pure draw by index; does not advance the stream.
  uint64_t u64_at(uint64_t index) const {
    return mix64(key_ + (index + 1) * 0x9e3779b97f4a7c15ull);
  }

  uint64_t u64() { return u64_at(counter_++); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return n == 0 ? 0 : u64() % n; }

  // Standard normal via Box-Muller; consumes two uniform draws.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log1p(-u1));
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  uint64_t key() const { return key_; }
  uint64_t counter() const { return counter_; }

 private:
  uint64_t key_;
  uint64_t counter_;
};

}  // namespace l2s

#endif  // L2S_RNG_HPP
