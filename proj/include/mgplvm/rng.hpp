#pragma once

#include <cmath>
#include <cstdint>

#include "mgplvm/common.hpp"

namespace mgplvm {

// Small counter-based generator (splitmix64 core). Streams derived from
// (seed, stream ids) are independent and reproducible across platforms,
// which keeps training traces bit-identical for a fixed configuration.
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {
    // decorrelate trivially related seeds
    next_u64();
    next_u64();
  }

  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Derived generator for an independent substream.
  Rng stream(std::uint64_t id) const { return Rng(mix(state_, id)); }
  Rng stream(std::uint64_t a, std::uint64_t b) const {
    return Rng(mix(mix(state_, a), b));
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1), never exactly 0.
  double uniform_pos() {
    double u = uniform();
    return u > 0 ? u : 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // Box-Muller
    double u1 = uniform_pos();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = kTwoPi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  VectorXd normal_vector(int n) {
    VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  int uniform_int(int n) {  // in [0, n)
    return int(next_u64() % std::uint64_t(n));
  }

private:
  std::uint64_t state_;
  double spare_ = 0;
  bool have_spare_ = false;
};

}  // namespace mgplvm
