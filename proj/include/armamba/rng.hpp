#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace armamba {

// Counter-based RNG: every consumer forks its own stream from (seed, stream
// keys), so results do not depend on call order, worker count, or platform
// library details. Core generator is SplitMix64.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

  // Derive an independent stream, e.g. fork(epoch, image_index).
  Rng fork(uint64_t a, uint64_t b = 0, uint64_t c = 0) const {
    uint64_t s = state_;
    s = mix(s ^ mix(a + 0x100000001b3ull));
    s = mix(s ^ mix(b + 0xc6a4a7935bd1e995ull));
    s = mix(s ^ mix(c + 0xff51afd7ed558ccdull));
    return Rng(FromState{}, s);
  }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  // Uniform in [0, 1).
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n).
  uint64_t next_below(uint64_t n) {
    // modulo bias is < 2^-40 for desk-scale n; acceptable and portable
    return n ? next_u64() % n : 0;
  }

  // Standard normal via Box-Muller (no std::normal_distribution: its output
  // is implementation-defined).
  double normal() {
    double u1 = next_double(), u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  struct FromState {};
  Rng(FromState, uint64_t s) : state_(s) {}

  static uint64_t mix(uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
  }

  uint64_t state_;
};

}  // namespace armamba
