#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mgplvm/common.hpp"
#include "mgplvm/kernel.hpp"
#include "mgplvm/manifold.hpp"

namespace mgplvm {

/// Per-neuron GP hyperparameters (kernel + observation noise).
struct GPHyper {
  KernelParams kernel;
  double log_sigma = -1.0;

  double sigma() const { return std::exp(log_sigma); }
  double sigma_sq() const { return std::exp(2.0 * log_sigma); }
};

/// Inducing locations on the manifold, one set per neuron. Rows are
/// element coordinates.
struct InducingSet {
  MatrixXd points;

  int size() const { return int(points.rows()); }
};

inline InducingSet sample_inducing(const Manifold& m, int count, Rng& rng) {
  check(count >= 1, "need at least one inducing point");
  InducingSet z;
  z.points.resize(count, m.ambient());
  for (int i = 0; i < count; ++i) z.points.row(i) = sample_uniform(m, rng).coords.transpose();
  return z;
}

// Jitter ladder added to K_ZZ (scaled by alpha^2) when Cholesky fails.
inline constexpr double kJitterLadder[] = {1e-8, 1e-7, 1e-6, 1e-5, 1e-4};

/// Factorization of K_ZZ shared across Monte-Carlo samples of one neuron.
struct SparseGPContext {
  const Manifold* manifold = nullptr;
  KernelParams kp;
  double log_sigma = 0;
  MatrixXd Z;        // m x ambient
  MatrixXd Kzz;      // without jitter
  MatrixXd Lz;       // chol(Kzz + jitter alpha^2 I)
  double jitter = 0; // coefficient actually used
};

inline SparseGPContext make_sparse_context(const KernelParams& kp, double log_sigma,
                                           const Manifold& m, const MatrixXd& Z) {
  SparseGPContext ctx;
  ctx.manifold = &m;
  ctx.kp = kp;
  ctx.log_sigma = log_sigma;
  ctx.Z = Z;
  ctx.Kzz = gram(kp, m, Z, Z);
  double a2 = kp.alpha_sq();
  for (double jit : kJitterLadder) {
    MatrixXd K = ctx.Kzz;
    K.diagonal().array() += jit * a2;
    Eigen::LLT<MatrixXd> llt(K);
    if (llt.info() == Eigen::Success) {
      ctx.Lz = llt.matrixL();
      ctx.jitter = jit;
      return ctx;
    }
  }
  throw numerical_error("Cholesky of K_ZZ failed after jitter escalation to 1e-4 (m=" +
                        std::to_string(Z.rows()) + ", alpha=" + std::to_string(kp.alpha()) +
                        ")");
}

struct BoundGrads {
  double dlog_alpha = 0;
  double dlog_sigma = 0;
  VectorXd dlog_ell;   // accumulated
  MatrixXd dX;         // M x ambient, accumulated
  MatrixXd dZ;         // m x ambient, accumulated

  void init(const KernelParams& kp, int M, int m_ind, int ambient) {
    dlog_alpha = dlog_sigma = 0;
    dlog_ell = VectorXd::Zero(kp.log_ell.size());
    dX = MatrixXd::Zero(M, ambient);
    dZ = MatrixXd::Zero(m_ind, ambient);
  }
};

/// Titsias collapsed bound on log p(y | latents) through the inducing set:
///   -1/2 y^T (Q + s^2 I)^{-1} y - 1/2 log|Q + s^2 I|
///   - tr(K - Q)/(2 s^2) - (M/2) log 2pi,   Q = Kxz Kzz^{-1} Kzx,
/// evaluated via the m x m Cholesky route in O(M m^2). Gradients (optional)
/// accumulate into `grads`.
inline double titsias_bound_ctx(const SparseGPContext& ctx, const VectorXd& y,
                                const MatrixXd& X, BoundGrads* grads = nullptr) {
  const Manifold& m = *ctx.manifold;
  const int M = int(X.rows());
  const int mi = int(ctx.Z.rows());
  check(y.size() == M, "titsias_bound: |y| must equal the number of latents");
  const double s2 = std::exp(2.0 * ctx.log_sigma);
  const double a2 = ctx.kp.alpha_sq();

  MatrixXd Kxz = gram(ctx.kp, m, X, ctx.Z);
  MatrixXd A = ctx.Lz.triangularView<Eigen::Lower>().solve(Kxz.transpose());  // m x M
  MatrixXd AAt = A * A.transpose();
  MatrixXd B = AAt / s2;
  B.diagonal().array() += 1.0;
  Eigen::LLT<MatrixXd> lltB(B);
  if (lltB.info() != Eigen::Success)
    throw numerical_error("Cholesky of the Woodbury core failed (should be PSD)");
  MatrixXd LB = lltB.matrixL();

  VectorXd Ay = A * y;
  VectorXd cy = LB.triangularView<Eigen::Lower>().solve(Ay);
  double yT_Siq_y = (y.squaredNorm() - cy.squaredNorm() / s2) / s2;
  double log_det = 2.0 * LB.diagonal().array().log().sum() + M * std::log(s2);
  double trKQ = M * a2 - A.squaredNorm();
  double bound =
      -0.5 * yT_Siq_y - 0.5 * log_det - trKQ / (2.0 * s2) - 0.5 * M * kLog2Pi;

  if (!grads) return bound;

  // beta = (Q + s^2 I)^{-1} y
  VectorXd b2 = LB.transpose().triangularView<Eigen::Upper>().solve(cy);  // B^{-1} A y
  VectorXd beta = (y - A.transpose() * b2 / s2) / s2;

  // W = Kzz_jit^{-1} Kzx  (m x M)
  MatrixXd W = ctx.Lz.transpose().triangularView<Eigen::Upper>().solve(A);

  // G_Q W^T without forming the M x M adjoint:
  //   G_Q = 1/2 beta beta^T - 1/2 Sigma_Q^{-1} + I/(2 s^2)
  MatrixXd AWt = A * W.transpose();  // m x m
  MatrixXd BiAWt = lltB.solve(AWt);
  MatrixXd SiqWt = (W.transpose() - A.transpose() * BiAWt / s2) / s2;  // M x m
  VectorXd Wbeta = W * beta;
  MatrixXd GQWt = 0.5 * beta * Wbeta.transpose() - 0.5 * SiqWt;
  GQWt.noalias() += W.transpose() / (2.0 * s2);

  // dF/dKxz = 2 G_Q W^T ; dF/dKzz = -W G_Q W^T. In W G_Q W^T the W W^T
  // pieces of the Sigma_Q^{-1} and I/(2 s^2) terms cancel, leaving
  //   1/2 (W beta)(W beta)^T + (A W^T)^T B^{-1} (A W^T) / (2 s^4).
  MatrixXd dKxz = 2.0 * GQWt;
  MatrixXd WGQWt = 0.5 * Wbeta * Wbeta.transpose();
  WGQWt.noalias() += AWt.transpose() * BiAWt / (2.0 * s2 * s2);
  MatrixXd dKzz = -WGQWt;

  // trace corrections: dF/d kdiag_i = -1/(2 s^2), kdiag = alpha^2
  grads->dlog_alpha += -double(M) * a2 / s2;

  // dF/d s^2
  double trB_inv = LB.triangularView<Eigen::Lower>().solve(MatrixXd::Identity(mi, mi)).squaredNorm();
  double tr_Siq = (M - mi + trB_inv) / s2;
  double dF_ds2 = 0.5 * beta.squaredNorm() - 0.5 * tr_Siq + trKQ / (2.0 * s2 * s2);
  grads->dlog_sigma += 2.0 * s2 * dF_ds2;

  // jitter scales with alpha^2: d(Kzz_jit)/dlog_alpha includes it
  grads->dlog_alpha += 2.0 * ctx.jitter * a2 * dKzz.trace();

  GramBackward gb;
  gb.dlog_ell = VectorXd::Zero(ctx.kp.log_ell.size());
  gb.dA = MatrixXd::Zero(M, m.ambient());
  gb.dB = MatrixXd::Zero(mi, m.ambient());
  gram_backward(ctx.kp, m, X, ctx.Z, Kxz, dKxz, gb, true, true);
  GramBackward gz;
  gz.dlog_ell = VectorXd::Zero(ctx.kp.log_ell.size());
  gz.dA = MatrixXd::Zero(mi, m.ambient());
  gz.dB = MatrixXd::Zero(mi, m.ambient());
  gram_backward(ctx.kp, m, ctx.Z, ctx.Z, ctx.Kzz, dKzz, gz, true, true);

  grads->dlog_alpha += gb.dlog_alpha + gz.dlog_alpha;
  grads->dlog_ell += gb.dlog_ell + gz.dlog_ell;
  grads->dX += gb.dA;
  grads->dZ += gb.dB + gz.dA + gz.dB;
  return bound;
}

/// Spec-facing wrapper building the context per call.
inline double titsias_bound(const VectorXd& y, const std::vector<Element>& latents,
                            const InducingSet& Z, const GPHyper& h, const Manifold& m) {
  check(int(y.size()) == int(latents.size()), "titsias_bound: |y| != |latents|");
  SparseGPContext ctx = make_sparse_context(h.kernel, h.log_sigma, m, Z.points);
  return titsias_bound_ctx(ctx, y, coords_matrix(m, latents));
}

/// Sparse-variational predictive mean and per-point variance at `queries`.
inline void sparse_predict_ctx(const SparseGPContext& ctx, const VectorXd& y,
                               const MatrixXd& X, const MatrixXd& Q,
                               VectorXd& mean, VectorXd& var) {
  const Manifold& m = *ctx.manifold;
  const double s2 = std::exp(2.0 * ctx.log_sigma);
  const double a2 = ctx.kp.alpha_sq();
  const int nq = int(Q.rows());

  MatrixXd Kxz = gram(ctx.kp, m, X, ctx.Z);
  MatrixXd A = ctx.Lz.triangularView<Eigen::Lower>().solve(Kxz.transpose());  // m x M
  MatrixXd B = A * A.transpose() / s2;
  B.diagonal().array() += 1.0;
  Eigen::LLT<MatrixXd> lltB(B);
  if (lltB.info() != Eigen::Success)
    throw numerical_error("Cholesky of the Woodbury core failed in sparse_predict");
  MatrixXd LB = lltB.matrixL();
  VectorXd cy = LB.triangularView<Eigen::Lower>().solve(A * y);

  MatrixXd Kqz = gram(ctx.kp, m, Q, ctx.Z);
  MatrixXd Aq = ctx.Lz.triangularView<Eigen::Lower>().solve(Kqz.transpose());  // m x nq
  MatrixXd Cq = LB.triangularView<Eigen::Lower>().solve(Aq);
  mean = Cq.transpose() * cy / s2;
  var.resize(nq);
  for (int q = 0; q < nq; ++q)
    var[q] = std::max(a2 - Aq.col(q).squaredNorm() + Cq.col(q).squaredNorm(), 0.0);
}

inline void sparse_predict(const VectorXd& y, const std::vector<Element>& latents,
                           const InducingSet& Z, const GPHyper& h, const Manifold& m,
                           const std::vector<Element>& queries, VectorXd& mean,
                           VectorXd& var) {
  SparseGPContext ctx = make_sparse_context(h.kernel, h.log_sigma, m, Z.points);
  sparse_predict_ctx(ctx, y, coords_matrix(m, latents), coords_matrix(m, queries), mean,
                     var);
}

}  // namespace mgplvm
