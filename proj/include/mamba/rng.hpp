// rng.hpp - deterministic seeded randomness with named substreams
//
// One global seed fans out to named substreams so every module draws from
// its own stream and runs replay bit-identically. Substream derivation and
// all distributions are implemented here (not via std:: distributions,
// whose output is implementation-defined).
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mamba/common.hpp"

namespace mamba {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}
}  // namespace detail

// xoshiro256** seeded through splitmix64. Identical seed + identical call
// sequence => identical draws, on any platform.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& word : state_) word = detail::splitmix64(sm);
  }

  // Derive a child stream from a name and optional indices. Children are
  // independent of the parent's draw position, so substreams can be
  // re-derived from counters when resuming a run.
  RngStream sub(const std::string& name, std::uint64_t a = 0, std::uint64_t b = 0, std::uint64_t c = 0) const {
    std::uint64_t h = fnv1a(name);
    h = fnv1a(&a, sizeof a, h);
    h = fnv1a(&b, sizeof b, h);
    h = fnv1a(&c, sizeof c, h);
    return RngStream(state_[0] ^ (state_[3] * 0x9e3779b97f4a7c15ull) ^ h);
  }

  std::uint64_t u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  Real uniform() { return static_cast<Real>(u64() >> 11) * 0x1.0p-53; }

  Real uniform(Real lo, Real hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw InvalidInputError("below(0)");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = u64();
    while (x >= limit) x = u64();
    return x % n;
  }

  int uniform_int(int lo, int hi_inclusive) {
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
  }

  bool bernoulli(Real p) { return uniform() < p; }

  // Box-Muller without caching so the draw count is predictable.
  Real normal() {
    Real u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const Real u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Index draw from unnormalized non-negative weights.
  int categorical(const Real* w, int n) {
    Real total = 0;
    for (int i = 0; i < n; ++i) total += w[i];
    if (!(total > 0) || !std::isfinite(total)) throw InvalidInputError("categorical: bad weights");
    Real u = uniform() * total;
    for (int i = 0; i < n; ++i) {
      u -= w[i];
      if (u < 0) return i;
    }
    return n - 1;
  }

  void fill_uniform(Mat& m, Real lo, Real hi) {
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = uniform(lo, hi);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t state_[4];
};

}  // namespace mamba
