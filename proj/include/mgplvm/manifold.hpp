#pragma once

#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mgplvm/common.hpp"
#include "mgplvm/rng.hpp"

namespace mgplvm {

enum class ManifoldKind { euclidean, torus, sphere2, sphere3, so3, product };

struct Element {
  VectorXd coords;
};

struct Tangent {
  VectorXd coords;
};

/// Latent-space description: which manifold, and how its elements and
/// tangent vectors are laid out as flat coordinate vectors.
///
/// Coordinate conventions:
///   Euclidean(n)   : length-n vector
///   Torus(n)       : n angles in [0, 2pi)
///   Sphere2        : unit 3-vector
///   Sphere3 / SO3  : unit quaternion (w, x, y, z)
///   Product        : factor coordinates concatenated in declaration order
class Manifold {
public:
  static Manifold euclidean(int n) {
    check(n >= 1, "Euclidean dimension must be >= 1");
    return Manifold(ManifoldKind::euclidean, n, n);
  }
  static Manifold torus(int n) {
    check(n >= 1, "Torus dimension must be >= 1");
    return Manifold(ManifoldKind::torus, n, n);
  }
  static Manifold sphere2() { return Manifold(ManifoldKind::sphere2, 2, 3); }
  static Manifold sphere3() { return Manifold(ManifoldKind::sphere3, 3, 4); }
  static Manifold so3() { return Manifold(ManifoldKind::so3, 3, 4); }

  static Manifold product(std::vector<Manifold> factors) {
    check(factors.size() >= 2, "Product needs >= 2 factors");
    Manifold m(ManifoldKind::product, 0, 0);
    for (const auto& f : factors)
      check(f.kind() != ManifoldKind::product, "Product factors cannot be Products");
    m.factors_ = std::move(factors);
    for (const auto& f : m.factors_) {
      m.coord_offsets_.push_back(m.ambient_);
      m.tangent_offsets_.push_back(m.dim_);
      m.dim_ += f.dim();
      m.ambient_ += f.ambient();
    }
    return m;
  }

  /// Parse tags like "R3", "T2", "S2", "S3", "SO3", "T1xR1".
  static Manifold parse(const std::string& tag) {
    std::vector<Manifold> factors;
    std::size_t pos = 0;
    while (pos < tag.size()) {
      std::size_t next = tag.find('x', pos);
      std::string part = tag.substr(pos, next == std::string::npos ? next : next - pos);
      factors.push_back(parse_factor(part, tag));
      if (next == std::string::npos) break;
      pos = next + 1;
    }
    check(!factors.empty(), "empty manifold tag");
    if (factors.size() == 1) return factors[0];
    return product(std::move(factors));
  }

  std::string tag() const {
    switch (kind_) {
      case ManifoldKind::euclidean: return "R" + std::to_string(dim_);
      case ManifoldKind::torus: return "T" + std::to_string(dim_);
      case ManifoldKind::sphere2: return "S2";
      case ManifoldKind::sphere3: return "S3";
      case ManifoldKind::so3: return "SO3";
      case ManifoldKind::product: {
        std::string s;
        for (std::size_t l = 0; l < factors_.size(); ++l) {
          if (l) s += "x";
          s += factors_[l].tag();
        }
        return s;
      }
    }
    return "?";
  }

  ManifoldKind kind() const { return kind_; }
  int dim() const { return dim_; }
  int ambient() const { return ambient_; }

  int n_factors() const {
    return kind_ == ManifoldKind::product ? int(factors_.size()) : 1;
  }
  const Manifold& factor(int l) const {
    return kind_ == ManifoldKind::product ? factors_[std::size_t(l)] : *this;
  }
  int coord_offset(int l) const {
    return kind_ == ManifoldKind::product ? coord_offsets_[std::size_t(l)] : 0;
  }
  int tangent_offset(int l) const {
    return kind_ == ManifoldKind::product ? tangent_offsets_[std::size_t(l)] : 0;
  }

  bool is_quaternion() const {
    return kind_ == ManifoldKind::sphere3 || kind_ == ManifoldKind::so3;
  }

  /// S^2 is not a Lie group; every group-only operation rejects it.
  bool is_lie_group() const {
    if (kind_ == ManifoldKind::sphere2) return false;
    if (kind_ == ManifoldKind::product) {
      for (const auto& f : factors_)
        if (!f.is_lie_group()) return false;
    }
    return true;
  }

  bool bounded() const {
    if (kind_ == ManifoldKind::euclidean) return false;
    if (kind_ == ManifoldKind::product) {
      for (const auto& f : factors_)
        if (!f.bounded()) return false;
    }
    return true;
  }

  bool operator==(const Manifold& o) const { return tag() == o.tag(); }

private:
  Manifold(ManifoldKind k, int dim, int ambient)
      : kind_(k), dim_(dim), ambient_(ambient) {}

  static Manifold parse_factor(const std::string& part, const std::string& full) {
    auto fail = [&]() -> Manifold {
      throw std::invalid_argument("bad manifold tag '" + part + "' in '" + full + "'");
    };
    if (part == "SO3") return so3();
    if (part == "S2") return sphere2();
    if (part == "S3") return sphere3();
    if (part == "S1") return torus(1);  // S^1 == T^1
    if (part.size() >= 2 && (part[0] == 'R' || part[0] == 'T')) {
      for (std::size_t i = 1; i < part.size(); ++i)
        if (!std::isdigit(static_cast<unsigned char>(part[i]))) return fail();
      int n = std::stoi(part.substr(1));
      if (n < 1) return fail();
      return part[0] == 'R' ? euclidean(n) : torus(n);
    }
    return fail();
  }

  ManifoldKind kind_;
  int dim_ = 0;
  int ambient_ = 0;
  std::vector<Manifold> factors_;
  std::vector<int> coord_offsets_;
  std::vector<int> tangent_offsets_;
};

// ---------------------------------------------------------------------------
// quaternion helpers (w, x, y, z layout, Hamilton convention)

inline Eigen::Vector4d quat_mul(const Eigen::Vector4d& a, const Eigen::Vector4d& b) {
  Eigen::Vector4d q;
  q[0] = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3];
  q[1] = a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2];
  q[2] = a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1];
  q[3] = a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0];
  return q;
}

/// 4x4 matrix L(a) with L(a) b = a * b (left multiplication).
inline Eigen::Matrix4d quat_left_matrix(const Eigen::Vector4d& a) {
  Eigen::Matrix4d L;
  L << a[0], -a[1], -a[2], -a[3],
       a[1],  a[0], -a[3],  a[2],
       a[2],  a[3],  a[0], -a[1],
       a[3], -a[2],  a[1],  a[0];
  return L;
}

/// 4x4 matrix R(b) with R(b) a = a * b (right multiplication).
inline Eigen::Matrix4d quat_right_matrix(const Eigen::Vector4d& b) {
  Eigen::Matrix4d R;
  R << b[0], -b[1], -b[2], -b[3],
       b[1],  b[0],  b[3], -b[2],
       b[2], -b[3],  b[0],  b[1],
       b[3],  b[2], -b[1],  b[0];
  return R;
}

/// Quaternion exponential: x in R^3 -> (cos|x|, x_hat sin|x|).
inline Eigen::Vector4d quat_exp(const Eigen::Vector3d& x) {
  double r = x.norm();
  Eigen::Vector4d q;
  if (r < 1e-4) {
    double r2 = r * r;
    // 4th-order series for cos r and sin r / r
    q[0] = 1.0 - r2 / 2.0 + r2 * r2 / 24.0;
    double sinc = 1.0 - r2 / 6.0 + r2 * r2 / 120.0;
    q.tail<3>() = sinc * x;
  } else {
    q[0] = std::cos(r);
    q.tail<3>() = (std::sin(r) / r) * x;
  }
  return q;
}

/// 4x3 Jacobian of quat_exp at x.
inline Eigen::Matrix<double, 4, 3> quat_exp_jacobian(const Eigen::Vector3d& x) {
  Eigen::Matrix<double, 4, 3> J;
  double r = x.norm();
  if (r < 1e-4) {
    double r2 = r * r;
    double sinc = 1.0 - r2 / 6.0 + r2 * r2 / 120.0;
    // d(cos r)/dx = -sinc(r) x ; d(sinc)/d(r^2) = -1/6 + r^2/60
    double dsinc_dr2 = -1.0 / 6.0 + r2 / 60.0;
    J.row(0) = (-sinc * x).transpose();
    J.bottomRows<3>() = sinc * Eigen::Matrix3d::Identity() +
                        2.0 * dsinc_dr2 * x * x.transpose();
  } else {
    Eigen::Vector3d xh = x / r;
    double s = std::sin(r), c = std::cos(r);
    J.row(0) = (-s * xh).transpose();
    J.bottomRows<3>() = (s / r) * Eigen::Matrix3d::Identity() +
                        (c - s / r) * xh * xh.transpose();
  }
  return J;
}

// ---------------------------------------------------------------------------

inline Element identity_element(const Manifold& m) {
  Element e;
  e.coords = VectorXd::Zero(m.ambient());
  switch (m.kind()) {
    case ManifoldKind::sphere2:
      e.coords[2] = 1.0;  // north pole
      break;
    case ManifoldKind::sphere3:
    case ManifoldKind::so3:
      e.coords[0] = 1.0;
      break;
    case ManifoldKind::product:
      for (int l = 0; l < m.n_factors(); ++l)
        e.coords.segment(m.coord_offset(l), m.factor(l).ambient()) =
            identity_element(m.factor(l)).coords;
      break;
    default:
      break;
  }
  return e;
}

/// Project arbitrary coordinates onto the manifold (wrap angles, normalize
/// unit vectors). Used after optimizer steps and deserialization.
inline void project_coords(const Manifold& m, Eigen::Ref<VectorXd> c) {
  switch (m.kind()) {
    case ManifoldKind::euclidean:
      break;
    case ManifoldKind::torus:
      for (int i = 0; i < c.size(); ++i) c[i] = wrap_2pi(c[i]);
      break;
    case ManifoldKind::sphere2:
    case ManifoldKind::sphere3:
    case ManifoldKind::so3: {
      double n = c.norm();
      check(n > 0, "cannot project zero vector onto sphere");
      c /= n;
      break;
    }
    case ManifoldKind::product:
      for (int l = 0; l < m.n_factors(); ++l) {
        auto seg = c.segment(m.coord_offset(l), m.factor(l).ambient());
        project_coords(m.factor(l), seg);
      }
      break;
  }
}

inline bool element_valid(const Manifold& m, const Element& e, double tol = 1e-9) {
  if (e.coords.size() != m.ambient()) return false;
  if (!e.coords.allFinite()) return false;
  switch (m.kind()) {
    case ManifoldKind::torus:
      for (int i = 0; i < e.coords.size(); ++i)
        if (e.coords[i] < 0 || e.coords[i] >= kTwoPi) return false;
      return true;
    case ManifoldKind::sphere2:
    case ManifoldKind::sphere3:
    case ManifoldKind::so3:
      return std::abs(e.coords.norm() - 1.0) <= tol;
    case ManifoldKind::product:
      for (int l = 0; l < m.n_factors(); ++l) {
        Element sub{e.coords.segment(m.coord_offset(l), m.factor(l).ambient())};
        if (!element_valid(m.factor(l), sub, tol)) return false;
      }
      return true;
    default:
      return true;
  }
}

inline void require_lie_group(const Manifold& m, const char* op) {
  if (!m.is_lie_group())
    throw unsupported_operation(std::string(op) + " requires a Lie group; " +
                                m.tag() + " is not one");
}

/// Capitalized exponential map R^dim -> manifold.
inline Element exp_map(const Manifold& m, const Tangent& x) {
  require_lie_group(m, "exp_map");
  check(x.coords.size() == m.dim(), "exp_map: tangent dimension mismatch");
  Element e;
  e.coords.resize(m.ambient());
  switch (m.kind()) {
    case ManifoldKind::euclidean:
      e.coords = x.coords;
      break;
    case ManifoldKind::torus:
      for (int i = 0; i < m.dim(); ++i) e.coords[i] = wrap_2pi(x.coords[i]);
      break;
    case ManifoldKind::sphere3:
    case ManifoldKind::so3:
      e.coords = quat_exp(Eigen::Vector3d(x.coords));
      break;
    case ManifoldKind::product:
      for (int l = 0; l < m.n_factors(); ++l) {
        Tangent xs{x.coords.segment(m.tangent_offset(l), m.factor(l).dim())};
        e.coords.segment(m.coord_offset(l), m.factor(l).ambient()) =
            exp_map(m.factor(l), xs).coords;
      }
      break;
    default:
      break;  // unreachable, sphere2 rejected above
  }
  return e;
}

inline Element group_mul(const Manifold& m, const Element& a, const Element& b) {
  require_lie_group(m, "group_mul");
  check(a.coords.size() == m.ambient() && b.coords.size() == m.ambient(),
        "group_mul: coordinate length mismatch");
  Element e;
  e.coords.resize(m.ambient());
  switch (m.kind()) {
    case ManifoldKind::euclidean:
      e.coords = a.coords + b.coords;
      break;
    case ManifoldKind::torus:
      for (int i = 0; i < m.dim(); ++i)
        e.coords[i] = wrap_2pi(a.coords[i] + b.coords[i]);
      break;
    case ManifoldKind::sphere3:
    case ManifoldKind::so3: {
      Eigen::Vector4d q = quat_mul(Eigen::Vector4d(a.coords), Eigen::Vector4d(b.coords));
      e.coords = q / q.norm();
      break;
    }
    case ManifoldKind::product:
      for (int l = 0; l < m.n_factors(); ++l) {
        Element as{a.coords.segment(m.coord_offset(l), m.factor(l).ambient())};
        Element bs{b.coords.segment(m.coord_offset(l), m.factor(l).ambient())};
        e.coords.segment(m.coord_offset(l), m.factor(l).ambient()) =
            group_mul(m.factor(l), as, bs).coords;
      }
      break;
    default:
      break;
  }
  return e;
}

inline Element group_inverse(const Manifold& m, const Element& a) {
  require_lie_group(m, "group_inverse");
  Element e;
  e.coords.resize(m.ambient());
  switch (m.kind()) {
    case ManifoldKind::euclidean:
      e.coords = -a.coords;
      break;
    case ManifoldKind::torus:
      for (int i = 0; i < m.dim(); ++i) e.coords[i] = wrap_2pi(-a.coords[i]);
      break;
    case ManifoldKind::sphere3:
    case ManifoldKind::so3:
      e.coords = a.coords;
      e.coords.tail(3) *= -1.0;  // conjugate
      break;
    case ManifoldKind::product:
      for (int l = 0; l < m.n_factors(); ++l) {
        Element as{a.coords.segment(m.coord_offset(l), m.factor(l).ambient())};
        e.coords.segment(m.coord_offset(l), m.factor(l).ambient()) =
            group_inverse(m.factor(l), as).coords;
      }
      break;
    default:
      break;
  }
  return e;
}

/// |J(x)|^{-1} for a tangent norm rho on SO(3)/S^3:
///   2 rho^2 / (1 - cos 2 rho) = (rho / sin rho)^2,
/// series-guarded near 0, domain error at the nonzero poles rho = k pi.
inline double quat_jac_inv_radial(double rho) {
  rho = std::abs(rho);
  if (rho < 1e-4) {
    double r2 = rho * rho;
    return 1.0 + r2 / 3.0 + r2 * r2 / 15.0;
  }
  double s = std::sin(rho);
  if (std::abs(s) < 1e-12)
    throw std::domain_error("inverse Jacobian pole at tangent norm " + std::to_string(rho));
  return sqr(rho / s);
}

/// d log(jac_inv)/d rho = 2 (1/rho - cot rho), series-guarded near 0.
inline double quat_log_jac_inv_dradial(double rho) {
  rho = std::abs(rho);
  if (rho < 1e-4) return 2.0 * rho / 3.0 + 4.0 * rho * rho * rho / 45.0;
  double s = std::sin(rho);
  if (std::abs(s) < 1e-12)
    throw std::domain_error("inverse Jacobian pole at tangent norm " + std::to_string(rho));
  return 2.0 * (1.0 / rho - std::cos(rho) / s);
}

inline double exp_jacobian_inv(const Manifold& m, const Tangent& x) {
  require_lie_group(m, "exp_jacobian_inv");
  check(x.coords.size() == m.dim(), "exp_jacobian_inv: tangent dimension mismatch");
  switch (m.kind()) {
    case ManifoldKind::euclidean:
    case ManifoldKind::torus:
      return 1.0;
    case ManifoldKind::sphere3:
    case ManifoldKind::so3:
      return quat_jac_inv_radial(x.coords.norm());
    case ManifoldKind::product: {
      double p = 1.0;
      for (int l = 0; l < m.n_factors(); ++l) {
        Tangent xs{x.coords.segment(m.tangent_offset(l), m.factor(l).dim())};
        p *= exp_jacobian_inv(m.factor(l), xs);
      }
      return p;
    }
    default:
      return 1.0;
  }
}

/// Dot-product based kernel distance (PSD by construction).
inline double kernel_distance(const Manifold& m, const Element& a, const Element& b) {
  check(a.coords.size() == m.ambient() && b.coords.size() == m.ambient(),
        "kernel_distance: coordinate length mismatch");
  switch (m.kind()) {
    case ManifoldKind::euclidean:
      return (a.coords - b.coords).squaredNorm();
    case ManifoldKind::torus: {
      double d = 0;
      for (int i = 0; i < m.dim(); ++i) d += 2.0 * (1.0 - std::cos(a.coords[i] - b.coords[i]));
      return d;
    }
    case ManifoldKind::sphere2:
      return 2.0 * (1.0 - a.coords.dot(b.coords));
    case ManifoldKind::sphere3:
      return 2.0 * (1.0 - a.coords.dot(b.coords));
    case ManifoldKind::so3:
      return 4.0 * (1.0 - sqr(a.coords.dot(b.coords)));
    case ManifoldKind::product: {
      double d = 0;
      for (int l = 0; l < m.n_factors(); ++l) {
        Element as{a.coords.segment(m.coord_offset(l), m.factor(l).ambient())};
        Element bs{b.coords.segment(m.coord_offset(l), m.factor(l).ambient())};
        d += kernel_distance(m.factor(l), as, bs);
      }
      return d;
    }
  }
  return 0;
}

inline double geodesic_distance(const Manifold& m, const Element& a, const Element& b) {
  check(a.coords.size() == m.ambient() && b.coords.size() == m.ambient(),
        "geodesic_distance: coordinate length mismatch");
  switch (m.kind()) {
    case ManifoldKind::euclidean:
      return (a.coords - b.coords).norm();
    case ManifoldKind::torus: {
      double s = 0;
      for (int i = 0; i < m.dim(); ++i) s += sqr(wrap_pi(a.coords[i] - b.coords[i]));
      return std::sqrt(s);
    }
    case ManifoldKind::sphere2:
    case ManifoldKind::sphere3:
      return std::acos(clamp(a.coords.dot(b.coords), -1.0, 1.0));
    case ManifoldKind::so3:
      return 2.0 * std::acos(clamp(std::abs(a.coords.dot(b.coords)), -1.0, 1.0));
    case ManifoldKind::product: {
      double s = 0;
      for (int l = 0; l < m.n_factors(); ++l) {
        Element as{a.coords.segment(m.coord_offset(l), m.factor(l).ambient())};
        Element bs{b.coords.segment(m.coord_offset(l), m.factor(l).ambient())};
        s += sqr(geodesic_distance(m.factor(l), as, bs));
      }
      return std::sqrt(s);
    }
  }
  return 0;
}

/// Maximum geodesic distance (Euclidean factors contribute a nominal 2,
/// the diameter of the unit-prior 1-sigma ball, for scale heuristics only).
inline double manifold_diameter(const Manifold& m) {
  switch (m.kind()) {
    case ManifoldKind::euclidean:
      return 2.0 * std::sqrt(double(m.dim()));
    case ManifoldKind::torus:
      return M_PI * std::sqrt(double(m.dim()));
    case ManifoldKind::sphere2:
    case ManifoldKind::sphere3:
    case ManifoldKind::so3:
      return M_PI;
    case ManifoldKind::product: {
      double s = 0;
      for (int l = 0; l < m.n_factors(); ++l) s += sqr(manifold_diameter(m.factor(l)));
      return std::sqrt(s);
    }
  }
  return 0;
}

/// log of the manifold volume under the Haar/round measure.
inline double log_volume(const Manifold& m) {
  switch (m.kind()) {
    case ManifoldKind::torus:
      return m.dim() * std::log(kTwoPi);
    case ManifoldKind::sphere2:
      return std::log(4.0 * M_PI);
    case ManifoldKind::sphere3:
      return std::log(2.0 * M_PI * M_PI);
    case ManifoldKind::so3:
      return std::log(M_PI * M_PI);
    case ManifoldKind::product: {
      double s = 0;
      for (int l = 0; l < m.n_factors(); ++l) s += log_volume(m.factor(l));
      return s;
    }
    case ManifoldKind::euclidean:
      throw unsupported_operation("Euclidean manifolds have no finite volume");
  }
  return 0;
}

/// Uniform prior log-density (inverse volume) for bounded manifolds.
inline double uniform_log_prior(const Manifold& m) {
  if (!m.bounded())
    throw unsupported_operation(
        "uniform_log_prior requires a bounded manifold; use the Gaussian prior for " + m.tag());
  return -log_volume(m);
}

/// Uniform sample under the volume measure; Euclidean factors sample the
/// standard-normal prior.
inline Element sample_uniform(const Manifold& m, Rng& rng) {
  Element e;
  e.coords.resize(m.ambient());
  switch (m.kind()) {
    case ManifoldKind::euclidean:
      e.coords = rng.normal_vector(m.dim());
      break;
    case ManifoldKind::torus:
      for (int i = 0; i < m.dim(); ++i) e.coords[i] = rng.uniform(0.0, kTwoPi);
      break;
    case ManifoldKind::sphere2:
    case ManifoldKind::sphere3:
    case ManifoldKind::so3: {
      VectorXd g = rng.normal_vector(m.ambient());
      while (g.norm() < 1e-12) g = rng.normal_vector(m.ambient());
      e.coords = g / g.norm();
      break;
    }
    case ManifoldKind::product:
      for (int l = 0; l < m.n_factors(); ++l)
        e.coords.segment(m.coord_offset(l), m.factor(l).ambient()) =
            sample_uniform(m.factor(l), rng).coords;
      break;
  }
  return e;
}

}  // namespace mgplvm
