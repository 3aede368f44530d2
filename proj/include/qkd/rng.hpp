#pragma once
// Deterministic counter-based RNG. Every output is a pure function of
// (seed, stream, counter), so round i of a simulation can be generated in
// isolation: splitting work across threads or re-running a single round gives
// bit-identical results. The mixer is the splitmix64 finalizer.

#include <cassert>
#include <cmath>
#include <cstdint>

#include "qkd/bits.hpp"

namespace qkd {

inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

class CounterRng {
 public:
  explicit CounterRng(uint64_t seed, uint64_t stream = 0)
      : base_(mix64(mix64(seed) + 0x9e3779b97f4a7c15ull * stream)) {}

  // Pure draw: value at counter c, lane sub. Does not advance state.
  uint64_t at(uint64_t c, uint64_t sub = 0) const {
    return mix64(base_ + 0x9e3779b97f4a7c15ull * c + 0xd1342543de82ef95ull * sub);
  }

  uint64_t u64() { return at(ctr_++); }

  double uniform() { return double(u64() >> 11) * 0x1.0p-53; }  // [0,1)
  bool bernoulli(double p) { return uniform() < p; }

  // Unbiased enough for simulation use (Lemire reduction).
  uint64_t below(uint64_t n) {
    assert(n > 0);
    return uint64_t((__uint128_t(u64()) * n) >> 64);
  }

  // Box-Muller; consumes two draws.
  double gauss() {
    double u1 = uniform(), u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // Binomial(n, p) sampler for aggregate-count generation. Exact for small n;
  // Poisson (Knuth) for small means (the relevant regime: gains << 1); normal
  // approximation with clamping for large means, where the relative skew is
  // negligible at the counts this project handles (>= 10^3).
  uint64_t binomial(uint64_t n, double p) {
    assert(p >= 0.0 && p <= 1.0);
    if (n == 0 || p <= 0.0) return 0;
    if (p >= 1.0) return n;
    double mean = double(n) * p;
    if (n <= 64) {
      uint64_t k = 0;
      for (uint64_t i = 0; i < n; ++i) k += bernoulli(p);
      return k;
    }
    if (mean <= 50.0 && p < 0.05) {
      uint64_t k = poisson(mean);
      return k > n ? n : k;
    }
    double sd = std::sqrt(mean * (1.0 - p));
    double x = std::round(mean + sd * gauss());
    if (x < 0) x = 0;
    if (x > double(n)) x = double(n);
    return uint64_t(x);
  }

  uint64_t poisson(double mean) {
    assert(mean >= 0.0);
    if (mean <= 0.0) return 0;
    if (mean < 60.0) {  // Knuth product-of-uniforms
      double limit = std::exp(-mean), prod = uniform();
      uint64_t k = 0;
      while (prod > limit) {
        ++k;
        prod *= uniform();
      }
      return k;
    }
    double x = std::round(mean + std::sqrt(mean) * gauss());
    return x < 0 ? 0 : uint64_t(x);
  }

  void fill(BitVec& v) {
    auto w = v.words();
    for (auto& x : w) x = u64();
    if (v.size() & 63) w.back() &= (uint64_t(1) << (v.size() & 63)) - 1;
  }
  BitVec random_bits(uint64_t n) {
    BitVec v(n);
    fill(v);
    return v;
  }

 private:
  uint64_t base_;
  uint64_t ctr_ = 0;
};

}  // namespace qkd
