#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace mgplvm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kTwoPi = 6.283185307179586476925286766559;
inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Thrown when an operation needs group structure a manifold does not have
// (e.g. exp_map on S^2).
class unsupported_operation : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

// Thrown when linear algebra fails beyond recovery (jitter ladder exhausted,
// non-finite intermediates).
class numerical_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

/// Wrap an angle into [0, 2pi).
inline double wrap_2pi(double a) {
  double w = std::fmod(a, kTwoPi);
  if (w < 0) w += kTwoPi;
  // fmod can return exactly 2pi after the correction when a is a tiny
  // negative number
  if (w >= kTwoPi) w = 0.0;
  return w;
}

/// Wrap an angle difference into (-pi, pi].
inline double wrap_pi(double a) {
  double w = std::fmod(a, kTwoPi);
  if (w > M_PI) w -= kTwoPi;
  if (w <= -M_PI) w += kTwoPi;
  return w;
}

inline double log_sum_exp(const double* vals, int n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) mx = std::max(mx, vals[i]);
  if (!std::isfinite(mx)) return mx;
  double s = 0;
  for (int i = 0; i < n; ++i) s += std::exp(vals[i] - mx);
  return mx + std::log(s);
}

inline double sqr(double x) { return x * x; }

inline double clamp(double x, double lo, double hi) {
  return x < lo ? lo : (x > hi ? hi : x);
}

}  // namespace mgplvm
