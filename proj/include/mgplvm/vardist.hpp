#pragma once

#include <cmath>
#include <vector>

#include "mgplvm/common.hpp"
#include "mgplvm/manifold.hpp"
#include "mgplvm/rng.hpp"

namespace mgplvm {

// ---------------------------------------------------------------------------
// Gaussian base distribution r_theta(x) = N(x; 0, L L^T)

struct GaussianBase {
  VectorXd log_diag;  // log of the diagonal of L
  MatrixXd lower;     // strictly lower triangle of L (ignored when diagonal_only)
  bool diagonal_only = true;

  int dim() const { return int(log_diag.size()); }

  static GaussianBase isotropic(int dim, double sigma, bool diagonal_only = true) {
    GaussianBase b;
    b.log_diag = VectorXd::Constant(dim, std::log(sigma));
    b.lower = MatrixXd::Zero(dim, dim);
    b.diagonal_only = diagonal_only;
    return b;
  }

  MatrixXd scale() const {
    int d = dim();
    MatrixXd L = MatrixXd::Zero(d, d);
    if (!diagonal_only)
      L.triangularView<Eigen::StrictlyLower>() =
          lower.triangularView<Eigen::StrictlyLower>();
    for (int i = 0; i < d; ++i) L(i, i) = std::exp(log_diag[i]);
    return L;
  }

  int n_params() const {
    int d = dim();
    return diagonal_only ? d : d + d * (d - 1) / 2;
  }

  VectorXd params() const {
    VectorXd p(n_params());
    p.head(dim()) = log_diag;
    if (!diagonal_only) {
      int idx = dim();
      for (int a = 1; a < dim(); ++a)
        for (int b = 0; b < a; ++b) p[idx++] = lower(a, b);
    }
    return p;
  }

  void set_params(const VectorXd& p) {
    check(p.size() == n_params(), "GaussianBase: parameter count mismatch");
    log_diag = p.head(dim());
    if (!diagonal_only) {
      int idx = dim();
      for (int a = 1; a < dim(); ++a)
        for (int b = 0; b < a; ++b) lower(a, b) = p[idx++];
    }
  }

  /// Fold dF/dL (explicit) plus the pathwise contribution through x = L eps
  /// (dF/dx and the draw eps) into gradients w.r.t. the scale parameters.
  VectorXd chain_scale(const MatrixXd& dL_explicit, const VectorXd& dx,
                       const VectorXd& eps) const {
    int d = dim();
    MatrixXd G = dL_explicit;
    if (G.size() == 0) G = MatrixXd::Zero(d, d);
    G.noalias() += dx * eps.transpose();
    VectorXd out(n_params());
    for (int i = 0; i < d; ++i) out[i] = G(i, i) * std::exp(log_diag[i]);
    if (!diagonal_only) {
      int idx = d;
      for (int a = 1; a < d; ++a)
        for (int b = 0; b < a; ++b) out[idx++] = G(a, b);
    }
    return out;
  }
};

/// log N(u; 0, L L^T) with optional gradients w.r.t. u and L.
inline double gaussian_log_density(const MatrixXd& L, const VectorXd& u,
                                   VectorXd* du = nullptr, MatrixXd* dL = nullptr) {
  int d = int(u.size());
  VectorXd v = L.triangularView<Eigen::Lower>().solve(u);
  double log_det = 0;
  for (int i = 0; i < d; ++i) log_det += std::log(L(i, i));
  double val = -0.5 * v.squaredNorm() - log_det - 0.5 * d * kLog2Pi;
  if (du || dL) {
    VectorXd a = L.transpose().triangularView<Eigen::Upper>().solve(v);  // = Sigma^{-1} u
    if (du) *du = -a;
    if (dL) {
      *dL = a * v.transpose();
      for (int i = 0; i < d; ++i) (*dL)(i, i) -= 1.0 / L(i, i);
    }
  }
  return val;
}

// ---------------------------------------------------------------------------
// Wrapped densities q~(Exp x) = sum_preimages r(x') |J(x')|^{-1}

struct WrappedGrad {
  VectorXd dx;  // total derivative w.r.t. the base point x
  MatrixXd dL;  // explicit derivative w.r.t. the scale factor L
};

inline int default_k_max(const Manifold& f) {
  switch (f.kind()) {
    case ManifoldKind::torus: return 3;
    case ManifoldKind::sphere3: return 3;
    case ManifoldKind::so3: return 5;
    default: return 1;
  }
}

namespace detail {

inline double torus_wrapped_log_density(const GaussianBase& base, const VectorXd& x,
                                        int k_max, WrappedGrad* wg) {
  int n = int(x.size());
  MatrixXd L = base.scale();
  int span = 2 * k_max + 1;
  int n_terms = 1;
  for (int i = 0; i < n; ++i) n_terms *= span;

  std::vector<double> t(n_terms);
  std::vector<VectorXd> us(wg ? n_terms : 0);
  VectorXd ks = VectorXd::Constant(n, -k_max);
  VectorXd u(n);
  for (int idx = 0; idx < n_terms; ++idx) {
    u = x + kTwoPi * ks;
    t[idx] = gaussian_log_density(L, u);
    if (wg) us[idx] = u;
    // odometer over the integer grid
    for (int i = 0; i < n; ++i) {
      if (ks[i] < k_max) {
        ks[i] += 1;
        break;
      }
      ks[i] = -k_max;
    }
  }
  double lq = log_sum_exp(t.data(), n_terms);
  if (wg) {
    wg->dx = VectorXd::Zero(n);
    wg->dL = MatrixXd::Zero(n, n);
    VectorXd du(n);
    MatrixXd dL(n, n);
    for (int idx = 0; idx < n_terms; ++idx) {
      double p = std::exp(t[idx] - lq);
      if (p < 1e-300) continue;
      gaussian_log_density(L, us[idx], &du, &dL);
      wg->dx += p * du;
      wg->dL += p * dL;
    }
  }
  return lq;
}

inline double quat_wrapped_log_density(bool so3, const GaussianBase& base,
                                       const VectorXd& x, int k_max, WrappedGrad* wg) {
  const double c = so3 ? M_PI : kTwoPi;
  MatrixXd L = base.scale();
  double r = x.norm();

  if (r < 1e-12) {
    // Exp is singular on the spheres r = c|k|, k != 0; at the origin only the
    // k = 0 preimage is counted (the direction x_hat is undefined there).
    double lq = gaussian_log_density(
        L, x, wg ? &wg->dx : nullptr, wg ? &wg->dL : nullptr);
    return lq;
  }

  Eigen::Vector3d xh = x / r;
  int n_terms = 2 * k_max + 1;
  std::vector<double> t(n_terms), s(n_terms);
  for (int k = -k_max; k <= k_max; ++k) {
    int idx = k + k_max;
    s[idx] = r + c * k;
    VectorXd u = s[idx] * xh;
    t[idx] = gaussian_log_density(L, u) + std::log(quat_jac_inv_radial(s[idx]));
  }
  double lq = log_sum_exp(t.data(), n_terms);
  if (wg) {
    wg->dx = VectorXd::Zero(3);
    wg->dL = MatrixXd::Zero(3, 3);
    Eigen::Matrix3d proj = Eigen::Matrix3d::Identity() - xh * xh.transpose();
    VectorXd du(3);
    MatrixXd dL(3, 3);
    for (int k = -k_max; k <= k_max; ++k) {
      int idx = k + k_max;
      double p = std::exp(t[idx] - lq);
      if (p < 1e-300) continue;
      VectorXd u = s[idx] * xh;
      gaussian_log_density(L, u, &du, &dL);
      // du/dx = I + (ck / r) (I - xh xh^T); d|s|/dx = sign(s) xh
      double ck_over_r = c * k / r;
      VectorXd dt_dx = du + ck_over_r * (proj * du);
      double sgn = s[idx] >= 0 ? 1.0 : -1.0;
      dt_dx += quat_log_jac_inv_dradial(s[idx]) * sgn * VectorXd(xh);
      wg->dx += p * dt_dx;
      wg->dL += p * dL;
    }
  }
  return lq;
}

}  // namespace detail

/// Push-forward log-density of the reparameterized sample Exp(x) for a
/// single non-product Lie-group manifold, truncated at |k| <= k_max.
inline double wrapped_log_density(const Manifold& m, const GaussianBase& base,
                                  const Tangent& x, int k_max,
                                  WrappedGrad* wg = nullptr) {
  require_lie_group(m, "wrapped_log_density");
  check(m.kind() != ManifoldKind::product,
        "wrapped_log_density applies per factor; decompose the product");
  check(k_max >= 1, "k_max must be >= 1");
  check(x.coords.size() == m.dim(), "wrapped_log_density: tangent dimension mismatch");
  check(base.dim() == m.dim(), "wrapped_log_density: base dimension mismatch");
  switch (m.kind()) {
    case ManifoldKind::euclidean:
      return gaussian_log_density(base.scale(), x.coords, wg ? &wg->dx : nullptr,
                                  wg ? &wg->dL : nullptr);
    case ManifoldKind::torus:
      return detail::torus_wrapped_log_density(base, x.coords, k_max, wg);
    case ManifoldKind::sphere3:
      return detail::quat_wrapped_log_density(false, base, x.coords, k_max, wg);
    case ManifoldKind::so3:
      return detail::quat_wrapped_log_density(true, base, x.coords, k_max, wg);
    default:
      throw unsupported_operation("wrapped_log_density on " + m.tag());
  }
}

// ---------------------------------------------------------------------------
// von Mises-Fisher on S^2

/// log q(g; mean, kappa) of the S^2 VMF density.
inline double vmf_log_density(const Element& mean, double kappa, const Element& g) {
  check(mean.coords.size() == 3 && g.coords.size() == 3, "vmf_log_density expects S^2");
  check(kappa >= 0, "vmf_log_density: kappa must be >= 0");
  double t = clamp(mean.coords.dot(g.coords), -1.0, 1.0);
  if (kappa < 1e-6)
    return -std::log(4.0 * M_PI) + kappa * t + kappa * kappa / 6.0;
  // kappa / (2 pi (e^k - e^-k)) e^{k t}, written overflow-safe
  return std::log(kappa) - std::log(kTwoPi) - kappa - std::log1p(-std::exp(-2.0 * kappa)) +
         kappa * t;
}

/// Closed-form S^2 VMF entropy, strictly decreasing in kappa.
inline double vmf_entropy(double kappa) {
  check(kappa >= 0, "vmf_entropy: kappa must be >= 0");
  if (kappa < 1e-6) return std::log(4.0 * M_PI) - kappa * kappa / 6.0;
  // H = -log(kappa / (4 pi sinh kappa)) - kappa / tanh(kappa) + 1
  double log_sinh = kappa - std::log(2.0) + std::log1p(-std::exp(-2.0 * kappa));
  double coth = (1.0 + std::exp(-2.0 * kappa)) / (1.0 - std::exp(-2.0 * kappa));
  return std::log(4.0 * M_PI) + log_sinh - std::log(kappa) - kappa * coth + 1.0;
}

inline double vmf_entropy_dkappa(double kappa) {
  if (kappa < 1e-4) return -kappa / 3.0 + kappa * kappa * kappa / 15.0;
  // dH/dk = kappa / sinh^2(kappa) - 1/kappa
  double em = std::exp(-kappa);
  double sinh_k = (1.0 - em * em) / (2.0 * em);  // safe: overflow only past ~700
  if (!std::isfinite(sinh_k) || sinh_k > 1e150) return -1.0 / kappa;
  return kappa / (sinh_k * sinh_k) - 1.0 / kappa;
}

namespace detail {

/// w = 1 + log(u + (1-u) e^{-2k}) / k, the inverse-CDF of the VMF cosine.
inline double vmf_sample_w(double kappa, double u, double* dw_dkappa) {
  u = clamp(u, 1e-12, 1.0 - 1e-12);
  if (kappa < 1e-4) {
    if (dw_dkappa) *dw_dkappa = 2.0 * u * (1.0 - u);
    return 2.0 * u - 1.0 + 2.0 * kappa * u * (1.0 - u);
  }
  double terms[2] = {std::log(u), std::log1p(-u) - 2.0 * kappa};
  double log_a = log_sum_exp(terms, 2);
  double w = 1.0 + log_a / kappa;
  if (dw_dkappa) {
    // dA/dk / A = -2 exp(log(1-u) - 2k - log A)
    double da_over_a = -2.0 * std::exp(std::log1p(-u) - 2.0 * kappa - log_a);
    *dw_dkappa = -log_a / (kappa * kappa) + da_over_a / kappa;
  }
  return clamp(w, -1.0, 1.0);
}

/// Rotation taking e3 to the unit vector mu (Rodrigues two-vector form);
/// falls back to a fixed pi-rotation near the antipode.
inline Eigen::Matrix3d rotation_from_north(const Eigen::Vector3d& mu) {
  double c = mu[2];
  if (c < -1.0 + 1e-9) {
    Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
    R(1, 1) = -1;
    R(2, 2) = -1;
    return R;
  }
  Eigen::Vector3d w(-mu[1], mu[0], 0.0);
  Eigen::Matrix3d wx;
  wx << 0, -w[2], w[1], w[2], 0, -w[0], -w[1], w[0], 0;
  return Eigen::Matrix3d::Identity() + wx + wx * wx / (1.0 + c);
}

}  // namespace detail

struct VmfSampleGrad {
  Eigen::Matrix3d d_mu_raw;     // d g / d mean_raw (through normalization)
  Eigen::Vector3d d_log_kappa;  // d g / d log kappa (pathwise through w)
};

/// Reparameterized draw from VMF(mu_raw / |mu_raw|, exp(log_kappa)) on S^2
/// given uniform base draws (u, phi).
inline Eigen::Vector3d vmf_sample(const Eigen::Vector3d& mean_raw, double log_kappa,
                                  double u, double phi, VmfSampleGrad* g = nullptr) {
  double kappa = std::exp(log_kappa);
  double norm = mean_raw.norm();
  check(norm > 0, "vmf_sample: zero mean direction");
  Eigen::Vector3d mu = mean_raw / norm;

  double dw_dk = 0;
  double w = detail::vmf_sample_w(kappa, u, g ? &dw_dk : nullptr);
  double rho = std::sqrt(std::max(1.0 - w * w, 0.0));
  Eigen::Vector3d s(rho * std::cos(phi), rho * std::sin(phi), w);
  Eigen::Matrix3d R = detail::rotation_from_north(mu);
  Eigen::Vector3d out = R * s;

  if (g) {
    // pathwise through w (u, phi held fixed)
    double drho_dw = rho > 1e-12 ? -w / rho : 0.0;
    Eigen::Vector3d ds_dw(drho_dw * std::cos(phi), drho_dw * std::sin(phi), 1.0);
    g->d_log_kappa = kappa * dw_dk * (R * ds_dw);

    // through the rotation: derivative of R(mu) s w.r.t. mu, then through
    // the normalization of mean_raw
    Eigen::Matrix3d dRs_dmu;
    double c = mu[2];
    if (c < -1.0 + 1e-9) {
      dRs_dmu.setZero();  // fixed fallback rotation, measure-zero configuration
    } else {
      Eigen::Vector3d wv(-mu[1], mu[0], 0.0);
      double inv1c = 1.0 / (1.0 + c);
      Eigen::Vector3d ws = wv.cross(s);
      Eigen::Vector3d wws = wv.cross(ws);
      for (int a = 0; a < 3; ++a) {
        Eigen::Vector3d dw_da = Eigen::Vector3d::Zero();
        double dc_da = (a == 2) ? 1.0 : 0.0;
        if (a == 0) dw_da = Eigen::Vector3d(0, 1, 0);
        if (a == 1) dw_da = Eigen::Vector3d(-1, 0, 0);
        Eigen::Vector3d term = dw_da.cross(s);
        term += (dw_da.cross(ws) + wv.cross(dw_da.cross(s))) * inv1c;
        term -= wws * (dc_da * inv1c * inv1c);
        dRs_dmu.col(a) = term;
      }
    }
    Eigen::Matrix3d proj =
        (Eigen::Matrix3d::Identity() - mu * mu.transpose()) / norm;
    g->d_mu_raw = dRs_dmu * proj;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-condition variational state

struct LieFactorState {
  Element mean;
  GaussianBase base;
};

struct VmfFactorState {
  Eigen::Vector3d mean_raw = Eigen::Vector3d(0, 0, 1);
  double log_kappa = 0.0;

  Eigen::Vector3d mean_dir() const { return mean_raw / mean_raw.norm(); }
  double kappa() const { return std::exp(log_kappa); }
};

struct FactorState {
  bool is_vmf = false;
  LieFactorState lie;
  VmfFactorState vmf;
};

/// Q_theta factorized over conditions (and over product factors).
struct VariationalState {
  std::vector<std::vector<FactorState>> conditions;  // [M][n_factors]

  int n_conditions() const { return int(conditions.size()); }
};

/// Number of base-draw slots a factor consumes per sample.
inline int factor_draw_dim(const Manifold& f) {
  return f.kind() == ManifoldKind::sphere2 ? 2 : f.dim();
}

inline int total_draw_dim(const Manifold& m) {
  int d = 0;
  for (int l = 0; l < m.n_factors(); ++l) d += factor_draw_dim(m.factor(l));
  return d;
}

inline int factor_draw_offset(const Manifold& m, int l) {
  int d = 0;
  for (int f = 0; f < l; ++f) d += factor_draw_dim(m.factor(f));
  return d;
}

/// Means at the identity, base std = half the factor's tangent radius,
/// per Appendix-style initialization.
inline VariationalState make_initial_state(const Manifold& m, int M,
                                           bool full_scale = false) {
  VariationalState st;
  st.conditions.resize(std::size_t(M));
  for (auto& cond : st.conditions) {
    cond.resize(std::size_t(m.n_factors()));
    for (int l = 0; l < m.n_factors(); ++l) {
      const Manifold& f = m.factor(l);
      FactorState& fs = cond[std::size_t(l)];
      if (f.kind() == ManifoldKind::sphere2) {
        fs.is_vmf = true;
        fs.vmf = VmfFactorState{};
        fs.vmf.log_kappa = std::log(0.5);
      } else {
        fs.is_vmf = false;
        fs.lie.mean = identity_element(f);
        double radius = f.kind() == ManifoldKind::so3 ? M_PI / 2
                        : f.kind() == ManifoldKind::euclidean ? 2.0
                                                              : M_PI;
        fs.lie.base = GaussianBase::isotropic(f.dim(), radius / 2.0, !full_scale);
      }
    }
  }
  return st;
}

// ---------------------------------------------------------------------------
// Sampling

struct SampleBatch {
  int K = 0, M = 0;
  std::vector<MatrixXd> base;    // K matrices, M x total_draw_dim: x = L eps (Lie), (u, phi) (VMF)
  std::vector<MatrixXd> coords;  // K matrices, M x ambient
  MatrixXd log_q;                // K x M, total per condition
  std::vector<MatrixXd> log_q_factor;  // per factor, K x M
};

/// Standard-normal (Lie) and uniform (VMF) base draws, one independent
/// stream per (condition, sample) so results do not depend on worker count.
struct BaseDraws {
  int K = 0, M = 0;
  std::vector<MatrixXd> eps;  // K matrices, M x total_draw_dim
};

inline BaseDraws draw_base(const Manifold& m, int M, int K, const Rng& root) {
  BaseDraws d;
  d.K = K;
  d.M = M;
  int width = total_draw_dim(m);
  d.eps.assign(std::size_t(K), MatrixXd(M, width));
  for (int k = 0; k < K; ++k)
    for (int j = 0; j < M; ++j) {
      Rng r = root.stream(std::uint64_t(j), std::uint64_t(k));
      for (int l = 0; l < m.n_factors(); ++l) {
        int off = factor_draw_offset(m, l);
        if (m.factor(l).kind() == ManifoldKind::sphere2) {
          d.eps[std::size_t(k)](j, off) = r.uniform_pos();
          d.eps[std::size_t(k)](j, off + 1) = r.uniform(0.0, kTwoPi);
        } else {
          for (int t = 0; t < m.factor(l).dim(); ++t)
            d.eps[std::size_t(k)](j, off + t) = r.normal();
        }
      }
    }
  return d;
}

/// Per-(k, j, factor) Jacobians recorded during sampling, for the pathwise
/// gradient of downstream terms.
struct FactorPathGrad {
  MatrixXd d_coords_dmean;       // ambient_f x mean_dim_f
  MatrixXd d_coords_dx;          // ambient_f x dim_f (Lie only)
  VectorXd d_coords_dlogkappa;   // ambient_f (VMF only)
  WrappedGrad logq;              // Lie only: dlogq/dx and dlogq/dL
};

struct SamplePaths {
  int K = 0, M = 0;
  std::vector<FactorPathGrad> at;  // [(k*M + j)*F + f]
  FactorPathGrad& operator()(int k, int j, int f, int F) {
    return at[std::size_t((k * M + j) * F + f)];
  }
};

inline int factor_mean_dim(const Manifold& f) {
  if (f.kind() == ManifoldKind::sphere2) return 3;  // raw direction
  if (f.is_quaternion()) return 3;                  // tangent increment
  return f.dim();
}

/// Reparameterized sampling at fixed base draws. k_max is per factor.
inline SampleBatch sample_with(const VariationalState& st, const Manifold& m,
                               const BaseDraws& draws, const std::vector<int>& k_max,
                               SamplePaths* paths = nullptr) {
  const int K = draws.K, M = draws.M, F = m.n_factors();
  check(st.n_conditions() == M, "variational state / draw count mismatch");
  check(int(k_max.size()) == F, "k_max must have one entry per factor");
  SampleBatch out;
  out.K = K;
  out.M = M;
  out.base.assign(std::size_t(K), MatrixXd::Zero(M, total_draw_dim(m)));
  out.coords.assign(std::size_t(K), MatrixXd(M, m.ambient()));
  out.log_q = MatrixXd::Zero(K, M);
  out.log_q_factor.assign(std::size_t(F), MatrixXd::Zero(K, M));
  if (paths) {
    paths->K = K;
    paths->M = M;
    paths->at.assign(std::size_t(K) * M * F, FactorPathGrad{});
  }

  for (int k = 0; k < K; ++k) {
    for (int j = 0; j < M; ++j) {
      for (int f = 0; f < F; ++f) {
        const Manifold& fac = m.factor(f);
        const FactorState& fs = st.conditions[std::size_t(j)][std::size_t(f)];
        int doff = factor_draw_offset(m, f);
        int coff = m.coord_offset(f);
        FactorPathGrad* pg = paths ? &(*paths)(k, j, f, F) : nullptr;

        if (fs.is_vmf) {
          double u = draws.eps[std::size_t(k)](j, doff);
          double phi = draws.eps[std::size_t(k)](j, doff + 1);
          VmfSampleGrad vg;
          Eigen::Vector3d g =
              vmf_sample(fs.vmf.mean_raw, fs.vmf.log_kappa, u, phi, pg ? &vg : nullptr);
          out.coords[std::size_t(k)].row(j).segment(coff, 3) = g.transpose();
          out.base[std::size_t(k)](j, doff) = u;
          out.base[std::size_t(k)](j, doff + 1) = phi;
          Element mean{VectorXd(fs.vmf.mean_dir())};
          double lq = vmf_log_density(mean, fs.vmf.kappa(), Element{VectorXd(g)});
          out.log_q_factor[std::size_t(f)](k, j) = lq;
          out.log_q(k, j) += lq;
          if (pg) {
            pg->d_coords_dmean = vg.d_mu_raw;
            pg->d_coords_dlogkappa = vg.d_log_kappa;
          }
        } else {
          int d = fac.dim();
          MatrixXd L = fs.lie.base.scale();
          VectorXd eps = draws.eps[std::size_t(k)].row(j).segment(doff, d).transpose();
          VectorXd x = L.triangularView<Eigen::Lower>() * eps;
          out.base[std::size_t(k)].row(j).segment(doff, d) = x.transpose();
          Element g_tilde = exp_map(fac, Tangent{x});
          Element g = group_mul(fac, fs.lie.mean, g_tilde);
          out.coords[std::size_t(k)].row(j).segment(coff, fac.ambient()) =
              g.coords.transpose();
          double lq = wrapped_log_density(fac, fs.lie.base, Tangent{x}, k_max[std::size_t(f)],
                                          pg ? &pg->logq : nullptr);
          out.log_q_factor[std::size_t(f)](k, j) = lq;
          out.log_q(k, j) += lq;
          if (pg) {
            if (fac.is_quaternion()) {
              Eigen::Matrix4d lm = quat_left_matrix(Eigen::Vector4d(fs.lie.mean.coords));
              pg->d_coords_dx = lm * quat_exp_jacobian(Eigen::Vector3d(x));
              // mean increment delta: g(delta) = mean * Exp(delta) * g_tilde
              Eigen::Matrix4d rm = quat_right_matrix(Eigen::Vector4d(g_tilde.coords));
              pg->d_coords_dmean = (lm * rm).rightCols<3>();
            } else {
              pg->d_coords_dx = MatrixXd::Identity(d, d);
              pg->d_coords_dmean = MatrixXd::Identity(d, d);
            }
          }
        }
      }
    }
  }
  return out;
}

/// Draw a fresh batch (spec-facing entry point).
inline SampleBatch sample(const VariationalState& st, const Manifold& m, int K,
                          Rng& rng, const std::vector<int>* k_max_override = nullptr) {
  check(K >= 1, "sample: K must be >= 1");
  std::vector<int> km;
  if (k_max_override) {
    km = *k_max_override;
  } else {
    for (int l = 0; l < m.n_factors(); ++l) km.push_back(default_k_max(m.factor(l)));
  }
  BaseDraws draws = draw_base(m, st.n_conditions(), K, rng.stream(rng.next_u64()));
  return sample_with(st, m, draws, km);
}

// ---------------------------------------------------------------------------
// Entropy

/// Per-condition, per-factor entropy contributions. Bounded Lie factors use
/// the Monte-Carlo estimator capped at the uniform-distribution entropy;
/// Euclidean factors and S^2 (VMF) use closed forms.
inline MatrixXd entropy_breakdown(const VariationalState& st, const Manifold& m,
                                  const SampleBatch& batch,
                                  std::vector<std::vector<bool>>* capped = nullptr) {
  const int M = batch.M, F = m.n_factors();
  MatrixXd H = MatrixXd::Zero(M, F);
  if (capped) capped->assign(std::size_t(M), std::vector<bool>(std::size_t(F), false));
  for (int j = 0; j < M; ++j) {
    for (int f = 0; f < F; ++f) {
      const Manifold& fac = m.factor(f);
      const FactorState& fs = st.conditions[std::size_t(j)][std::size_t(f)];
      if (fs.is_vmf) {
        H(j, f) = vmf_entropy(fs.vmf.kappa());
      } else if (fac.kind() == ManifoldKind::euclidean) {
        // exact Gaussian entropy
        H(j, f) = 0.5 * fac.dim() * (kLog2Pi + 1.0) + fs.lie.base.log_diag.sum();
      } else {
        double h = -batch.log_q_factor[std::size_t(f)].col(j).mean();
        double cap = log_volume(fac);
        if (h > cap) {
          h = cap;
          if (capped) (*capped)[std::size_t(j)][std::size_t(f)] = true;
        }
        H(j, f) = h;
      }
    }
  }
  return H;
}

inline double entropy_mc(const VariationalState& st, const Manifold& m,
                         const SampleBatch& batch) {
  return entropy_breakdown(st, m, batch).sum();
}

}  // namespace mgplvm
