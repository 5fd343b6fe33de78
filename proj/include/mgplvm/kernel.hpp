#pragma once

#include <cmath>
#include <vector>

#include "mgplvm/common.hpp"
#include "mgplvm/manifold.hpp"

namespace mgplvm {

/// Hyperparameters of the manifold squared-exponential-style kernel
///   k(g, g') = alpha^2 exp(-d_M(g, g') / (2 l^2)),
/// held in log space so optimization is unconstrained. ARD tori get one
/// lengthscale per dimension, products one per factor.
struct KernelParams {
  double log_alpha = 0.0;
  VectorXd log_ell = VectorXd::Zero(1);
  bool ard = false;

  double alpha() const { return std::exp(log_alpha); }
  double alpha_sq() const { return std::exp(2.0 * log_alpha); }
};

inline int n_lengthscales(const Manifold& m, bool ard) {
  if (m.kind() == ManifoldKind::product) return m.n_factors();
  if (ard && m.kind() == ManifoldKind::torus) return m.dim();
  return 1;
}

inline void validate_kernel_params(const KernelParams& p, const Manifold& m) {
  if (p.ard && !(m.kind() == ManifoldKind::product ||
                 (m.kind() == ManifoldKind::torus && m.dim() >= 2)))
    throw std::invalid_argument("ARD is only supported on Torus(n>=2) and Product manifolds");
  int want = n_lengthscales(m, p.ard);
  if (p.log_ell.size() != want)
    throw std::invalid_argument("kernel expects " + std::to_string(want) +
                                " lengthscale(s) on " + m.tag() + ", got " +
                                std::to_string(p.log_ell.size()));
}

inline double kernel_diag(const KernelParams& p) { return p.alpha_sq(); }

namespace detail {

// Adds the exponent contribution -d_M / (2 l^2) of one (sub)manifold to E.
// A is n x ambient, B is m x ambient (coordinate rows); ell_base indexes
// the first lengthscale owned by this submanifold.
inline void accumulate_exponent(const KernelParams& p, const Manifold& m,
                                const Eigen::Ref<const MatrixXd>& A,
                                const Eigen::Ref<const MatrixXd>& B, int ell_base,
                                bool per_dim_ell, MatrixXd& E) {
  switch (m.kind()) {
    case ManifoldKind::euclidean: {
      double inv2l2 = 0.5 * std::exp(-2.0 * p.log_ell[ell_base]);
      VectorXd an = A.rowwise().squaredNorm();
      VectorXd bn = B.rowwise().squaredNorm();
      E.noalias() += (2.0 * inv2l2) * (A * B.transpose());
      E.colwise() -= inv2l2 * an;
      E.rowwise() -= inv2l2 * bn.transpose();
      break;
    }
    case ManifoldKind::torus: {
      // sum_r (cos(a_r - b_r) - 1) / l_r^2 via trig embedding + one gemm
      int n = m.dim();
      MatrixXd embA(A.rows(), 2 * n), embB(B.rows(), 2 * n);
      double const_term = 0;
      for (int r = 0; r < n; ++r) {
        double il2 = std::exp(-2.0 * p.log_ell[ell_base + (per_dim_ell ? r : 0)]);
        embA.col(2 * r) = il2 * A.col(r).array().cos().matrix();
        embA.col(2 * r + 1) = il2 * A.col(r).array().sin().matrix();
        embB.col(2 * r) = B.col(r).array().cos().matrix();
        embB.col(2 * r + 1) = B.col(r).array().sin().matrix();
        const_term += il2;
      }
      E.noalias() += embA * embB.transpose();
      E.array() -= const_term;
      break;
    }
    case ManifoldKind::sphere2:
    case ManifoldKind::sphere3: {
      double il2 = std::exp(-2.0 * p.log_ell[ell_base]);
      E.noalias() += il2 * (A * B.transpose());
      E.array() -= il2;
      break;
    }
    case ManifoldKind::so3: {
      double il2 = std::exp(-2.0 * p.log_ell[ell_base]);
      MatrixXd D = A * B.transpose();
      E.array() += 2.0 * il2 * (D.array().square() - 1.0);
      break;
    }
    case ManifoldKind::product:
      for (int l = 0; l < m.n_factors(); ++l)
        accumulate_exponent(p, m.factor(l),
                            A.middleCols(m.coord_offset(l), m.factor(l).ambient()),
                            B.middleCols(m.coord_offset(l), m.factor(l).ambient()),
                            ell_base + l, false, E);
      break;
  }
}

}  // namespace detail

/// Gram matrix K(A, B): entry (i, j) = k(A_i, B_j). Rows are coordinates.
inline MatrixXd gram(const KernelParams& p, const Manifold& m,
                     const Eigen::Ref<const MatrixXd>& A,
                     const Eigen::Ref<const MatrixXd>& B) {
  validate_kernel_params(p, m);
  check(A.cols() == m.ambient() && B.cols() == m.ambient(),
        "gram: coordinate width mismatch");
  MatrixXd E = MatrixXd::Zero(A.rows(), B.rows());
  bool per_dim = p.ard && m.kind() == ManifoldKind::torus;
  detail::accumulate_exponent(p, m, A, B, 0, per_dim, E);
  return (E.array() + 2.0 * p.log_alpha).exp().matrix();
}

inline MatrixXd coords_matrix(const Manifold& m, const std::vector<Element>& els) {
  MatrixXd X(els.size(), m.ambient());
  for (std::size_t i = 0; i < els.size(); ++i) {
    check(els[i].coords.size() == m.ambient(), "element coordinate length mismatch");
    X.row(i) = els[i].coords.transpose();
  }
  return X;
}

inline MatrixXd gram(const KernelParams& p, const Manifold& m,
                     const std::vector<Element>& A, const std::vector<Element>& B) {
  return gram(p, m, coords_matrix(m, A), coords_matrix(m, B));
}

inline double kernel_eval(const KernelParams& p, const Manifold& m,
                          const Element& a, const Element& b) {
  return gram(p, m, std::vector<Element>{a}, std::vector<Element>{b})(0, 0);
}

/// Adjoints of sum_ij Adj(i,j) K(i,j) w.r.t. kernel hyperparameters and the
/// input coordinates.
struct GramBackward {
  double dlog_alpha = 0.0;
  VectorXd dlog_ell;
  MatrixXd dA, dB;
};

namespace detail {

inline void gram_backward_factor(const KernelParams& p, const Manifold& m,
                                 const Eigen::Ref<const MatrixXd>& A,
                                 const Eigen::Ref<const MatrixXd>& B, int ell_base,
                                 bool per_dim_ell, const MatrixXd& W,
                                 GramBackward& out, bool wantA, bool wantB,
                                 int coord_base) {
  // W = Adj .* K; each exponent component -d_r/(2 l_r^2) contributes
  //   dlog_ell_r += sum W .* d_r / l_r^2
  //   dcoords    += W .* d(exponent)/dcoords
  switch (m.kind()) {
    case ManifoldKind::euclidean: {
      double il2 = std::exp(-2.0 * p.log_ell[ell_base]);
      VectorXd wr = W.rowwise().sum(), wc = W.colwise().sum();
      // d = |a - b|^2: sum W.*d = sum_i wr_i |a_i|^2 + sum_j wc_j |b_j|^2 - 2 tr(A' W B)
      double wd = wr.dot(A.rowwise().squaredNorm()) + wc.dot(B.rowwise().squaredNorm()) -
                  2.0 * (A.transpose() * W * B).trace();
      out.dlog_ell[ell_base] += wd * il2;
      if (wantA)
        out.dA.middleCols(coord_base, m.ambient()).noalias() +=
            il2 * (W * B - wr.asDiagonal() * A);
      if (wantB)
        out.dB.middleCols(coord_base, m.ambient()).noalias() +=
            il2 * (W.transpose() * A - wc.asDiagonal() * B);
      break;
    }
    case ManifoldKind::torus: {
      int n = m.dim();
      for (int r = 0; r < n; ++r) {
        int e = ell_base + (per_dim_ell ? r : 0);
        double il2 = std::exp(-2.0 * p.log_ell[e]);
        VectorXd ca = A.col(r).array().cos(), sa = A.col(r).array().sin();
        VectorXd cb = B.col(r).array().cos(), sb = B.col(r).array().sin();
        // cos(a - b) = ca cb + sa sb, rank-2; d_r = 2 (1 - cos)
        double wsum = W.sum();
        double wcos = ca.dot(W * cb) + sa.dot(W * sb);
        out.dlog_ell[e] += 2.0 * (wsum - wcos) * il2;
        // d(exponent)/da_r = -sin(a - b)/l_r^2
        if (wantA) {
          VectorXd Wcb = W * cb, Wsb = W * sb;
          out.dA.col(coord_base + r).array() +=
              -il2 * (sa.array() * Wcb.array() - ca.array() * Wsb.array());
        }
        if (wantB) {
          // d(exponent)/db_r = +sin(a - b)/l_r^2
          VectorXd Wtca = W.transpose() * ca, Wtsa = W.transpose() * sa;
          out.dB.col(coord_base + r).array() +=
              il2 * (Wtsa.array() * cb.array() - Wtca.array() * sb.array());
        }
      }
      break;
    }
    case ManifoldKind::sphere2:
    case ManifoldKind::sphere3: {
      double il2 = std::exp(-2.0 * p.log_ell[ell_base]);
      // d = 2 (1 - a.b); exponent = (a.b - 1)/l^2
      double wd = 2.0 * (W.sum() - (A.transpose() * W * B).trace());
      out.dlog_ell[ell_base] += wd * il2;
      if (wantA) out.dA.middleCols(coord_base, m.ambient()).noalias() += il2 * (W * B);
      if (wantB)
        out.dB.middleCols(coord_base, m.ambient()).noalias() += il2 * (W.transpose() * A);
      break;
    }
    case ManifoldKind::so3: {
      double il2 = std::exp(-2.0 * p.log_ell[ell_base]);
      MatrixXd D = A * B.transpose();
      // d = 4 (1 - D^2); exponent = 2 (D^2 - 1)/l^2
      double wd = 4.0 * (W.sum() - (W.array() * D.array().square()).sum());
      out.dlog_ell[ell_base] += wd * il2;
      MatrixXd WD = (W.array() * D.array()).matrix();
      if (wantA)
        out.dA.middleCols(coord_base, m.ambient()).noalias() += (4.0 * il2) * (WD * B);
      if (wantB)
        out.dB.middleCols(coord_base, m.ambient()).noalias() +=
            (4.0 * il2) * (WD.transpose() * A);
      break;
    }
    case ManifoldKind::product:
      for (int l = 0; l < m.n_factors(); ++l)
        gram_backward_factor(p, m.factor(l),
                             A.middleCols(m.coord_offset(l), m.factor(l).ambient()),
                             B.middleCols(m.coord_offset(l), m.factor(l).ambient()),
                             ell_base + l, false, W, out, wantA, wantB,
                             coord_base + m.coord_offset(l));
      break;
  }
}

}  // namespace detail

inline void gram_backward(const KernelParams& p, const Manifold& m,
                          const Eigen::Ref<const MatrixXd>& A,
                          const Eigen::Ref<const MatrixXd>& B, const MatrixXd& K,
                          const MatrixXd& Adj, GramBackward& out, bool wantA,
                          bool wantB) {
  MatrixXd W = (Adj.array() * K.array()).matrix();
  out.dlog_alpha += 2.0 * W.sum();
  if (out.dlog_ell.size() != p.log_ell.size()) out.dlog_ell = VectorXd::Zero(p.log_ell.size());
  if (wantA && out.dA.size() == 0) out.dA = MatrixXd::Zero(A.rows(), A.cols());
  if (wantB && out.dB.size() == 0) out.dB = MatrixXd::Zero(B.rows(), B.cols());
  bool per_dim = p.ard && m.kind() == ManifoldKind::torus;
  detail::gram_backward_factor(p, m, A, B, 0, per_dim, W, out, wantA, wantB, 0);
}

}  // namespace mgplvm
