#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "mgplvm/common.hpp"
#include "mgplvm/kernel.hpp"
#include "mgplvm/manifold.hpp"
#include "mgplvm/rng.hpp"
#include "mgplvm/sparsegp.hpp"
#include "mgplvm/threading.hpp"
#include "mgplvm/vardist.hpp"

namespace mgplvm {

/// Activity matrix: N neurons x M conditions.
struct Dataset {
  MatrixXd Y;
  std::vector<std::string> labels;  // optional per-condition labels

  int N() const { return int(Y.rows()); }
  int M() const { return int(Y.cols()); }
};

inline void validate_dataset(const Dataset& d) {
  check(d.N() >= 1 && d.M() >= 2, "dataset needs N >= 1 neurons and M >= 2 conditions");
  check(d.Y.allFinite(), "dataset contains non-finite entries");
}

struct ModelConfig {
  int m_inducing = 20;
  bool tie_params = true;
  bool ard = false;
  bool full_scale = false;
  int k_max_override = 0;  // 0 = per-factor defaults (3 tori/S3, 5 SO(3))
};

struct MGplvmModel {
  Manifold manifold = Manifold::torus(1);
  VariationalState vstate;
  std::vector<GPHyper> hypers;      // size 1 when tied, else N
  std::vector<InducingSet> inducing;  // size N
  bool tie_params = true;
  std::vector<int> k_max;  // per factor
  int N = 0, M = 0;

  const GPHyper& hyper(int i) const { return hypers[tie_params ? 0 : std::size_t(i)]; }
  GPHyper& hyper(int i) { return hypers[tie_params ? 0 : std::size_t(i)]; }

  /// Variational mean element of condition j (VMF factors use the mean
  /// direction).
  Element mean_element(int j) const {
    Element e;
    e.coords.resize(manifold.ambient());
    for (int f = 0; f < manifold.n_factors(); ++f) {
      const FactorState& fs = vstate.conditions[std::size_t(j)][std::size_t(f)];
      auto seg = e.coords.segment(manifold.coord_offset(f), manifold.factor(f).ambient());
      if (fs.is_vmf)
        seg = fs.vmf.mean_dir();
      else
        seg = fs.lie.mean.coords;
    }
    return e;
  }

  std::vector<Element> mean_elements() const {
    std::vector<Element> out;
    out.reserve(std::size_t(M));
    for (int j = 0; j < M; ++j) out.push_back(mean_element(j));
    return out;
  }
};

inline VectorXd init_log_lengthscales(const Manifold& m, bool ard) {
  int n = n_lengthscales(m, ard);
  VectorXd le(n);
  if (m.kind() == ManifoldKind::product) {
    for (int l = 0; l < n; ++l)
      le[l] = std::log(0.25 * manifold_diameter(m.factor(l)));
  } else if (ard) {
    le.setConstant(std::log(0.25 * M_PI));
  } else {
    le[0] = std::log(0.25 * manifold_diameter(m));
  }
  return le;
}

inline MGplvmModel make_model(const Manifold& m, const Dataset& data,
                              const ModelConfig& cfg, Rng& rng) {
  validate_dataset(data);
  MGplvmModel model;
  model.manifold = m;
  model.N = data.N();
  model.M = data.M();
  model.tie_params = cfg.tie_params;
  model.vstate = make_initial_state(m, data.M(), cfg.full_scale);
  for (int f = 0; f < m.n_factors(); ++f)
    model.k_max.push_back(cfg.k_max_override > 0 ? cfg.k_max_override
                                                 : default_k_max(m.factor(f)));

  auto row_sd = [&](int i) {
    VectorXd r = data.Y.row(i);
    double mu = r.mean();
    double v = (r.array() - mu).square().sum() / std::max(1, data.M() - 1);
    return std::max(std::sqrt(v), 1e-3);
  };
  double pooled_sd = [&]() {
    double mu = data.Y.mean();
    double v = (data.Y.array() - mu).square().sum() /
               std::max(1, data.N() * data.M() - 1);
    return std::max(std::sqrt(v), 1e-3);
  }();

  int n_h = cfg.tie_params ? 1 : data.N();
  for (int i = 0; i < n_h; ++i) {
    GPHyper h;
    h.kernel.ard = cfg.ard;
    h.kernel.log_ell = init_log_lengthscales(m, cfg.ard);
    double sd = cfg.tie_params ? pooled_sd : row_sd(i);
    h.kernel.log_alpha = std::log(sd);
    h.log_sigma = std::log(0.5 * sd);
    model.hypers.push_back(h);
  }

  int mi = std::min(data.M(), cfg.m_inducing);
  for (int i = 0; i < data.N(); ++i) {
    Rng r = rng.stream(0xabcdefULL, std::uint64_t(i));
    model.inducing.push_back(sample_inducing(m, mi, r));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Flat parameter vector

enum class BlockKind { plain, torus_wrap, quat_delta, unit_renorm, inducing_rows };
enum class BlockTarget { cond_mean, cond_scale, hyper, inducing };

struct ParamBlock {
  int offset = 0, size = 0;
  BlockKind kind = BlockKind::plain;
  BlockTarget target = BlockTarget::cond_mean;
  int j = -1, f = -1, i = -1;
};

struct ParamLayout {
  std::vector<ParamBlock> blocks;
  int total = 0;
  std::vector<std::uint8_t> warmup_frozen;  // variational scales + kernel alpha
  std::vector<std::uint8_t> global_block;   // hypers + inducing (frozen in CV stage 2)
  // direct lookup tables into `blocks`
  std::vector<int> mean_idx, scale_idx;  // indexed j * n_factors + f
  std::vector<int> hyper_idx, inducing_idx;
  int n_factors = 1;

  const ParamBlock& mean_block(int j, int f) const {
    return blocks[std::size_t(mean_idx[std::size_t(j * n_factors + f)])];
  }
  const ParamBlock& scale_block(int j, int f) const {
    return blocks[std::size_t(scale_idx[std::size_t(j * n_factors + f)])];
  }
  const ParamBlock& hyper_block(int i) const {
    return blocks[std::size_t(hyper_idx[std::size_t(i)])];
  }
  const ParamBlock& inducing_block(int i) const {
    return blocks[std::size_t(inducing_idx[std::size_t(i)])];
  }
};

inline ParamLayout build_layout(const MGplvmModel& model) {
  const Manifold& m = model.manifold;
  ParamLayout lay;
  lay.n_factors = m.n_factors();
  lay.mean_idx.assign(std::size_t(model.M * m.n_factors()), -1);
  lay.scale_idx.assign(std::size_t(model.M * m.n_factors()), -1);
  auto push = [&](int size, BlockKind kind, BlockTarget target, int j, int f, int i) {
    ParamBlock b;
    b.offset = lay.total;
    b.size = size;
    b.kind = kind;
    b.target = target;
    b.j = j;
    b.f = f;
    b.i = i;
    lay.blocks.push_back(b);
    lay.total += size;
    return int(lay.blocks.size()) - 1;
  };
  for (int j = 0; j < model.M; ++j) {
    for (int f = 0; f < m.n_factors(); ++f) {
      const Manifold& fac = m.factor(f);
      const FactorState& fs = model.vstate.conditions[std::size_t(j)][std::size_t(f)];
      BlockKind mk = BlockKind::plain;
      if (fac.kind() == ManifoldKind::torus) mk = BlockKind::torus_wrap;
      if (fac.is_quaternion()) mk = BlockKind::quat_delta;
      if (fs.is_vmf) mk = BlockKind::unit_renorm;
      lay.mean_idx[std::size_t(j * m.n_factors() + f)] =
          push(factor_mean_dim(fac), mk, BlockTarget::cond_mean, j, f, -1);
      int ns = fs.is_vmf ? 1 : fs.lie.base.n_params();
      lay.scale_idx[std::size_t(j * m.n_factors() + f)] =
          push(ns, BlockKind::plain, BlockTarget::cond_scale, j, f, -1);
    }
  }
  int n_h = int(model.hypers.size());
  int n_ell = int(model.hypers[0].kernel.log_ell.size());
  for (int i = 0; i < n_h; ++i)
    lay.hyper_idx.push_back(push(2 + n_ell, BlockKind::plain, BlockTarget::hyper, -1, -1, i));
  for (int i = 0; i < model.N; ++i)
    lay.inducing_idx.push_back(push(model.inducing[std::size_t(i)].size() * m.ambient(),
                                    BlockKind::inducing_rows, BlockTarget::inducing, -1,
                                    -1, i));

  lay.warmup_frozen.assign(std::size_t(lay.total), 0);
  lay.global_block.assign(std::size_t(lay.total), 0);
  for (const auto& b : lay.blocks) {
    if (b.target == BlockTarget::cond_scale)
      for (int t = 0; t < b.size; ++t) lay.warmup_frozen[std::size_t(b.offset + t)] = 1;
    if (b.target == BlockTarget::hyper) {
      lay.warmup_frozen[std::size_t(b.offset)] = 1;  // log_alpha
      for (int t = 0; t < b.size; ++t) lay.global_block[std::size_t(b.offset + t)] = 1;
    }
    if (b.target == BlockTarget::inducing)
      for (int t = 0; t < b.size; ++t) lay.global_block[std::size_t(b.offset + t)] = 1;
  }
  return lay;
}

inline VectorXd get_params(const MGplvmModel& model, const ParamLayout& lay) {
  VectorXd p = VectorXd::Zero(lay.total);
  const Manifold& m = model.manifold;
  for (const auto& b : lay.blocks) {
    auto seg = p.segment(b.offset, b.size);
    switch (b.target) {
      case BlockTarget::cond_mean: {
        const FactorState& fs = model.vstate.conditions[std::size_t(b.j)][std::size_t(b.f)];
        if (fs.is_vmf)
          seg = fs.vmf.mean_raw;
        else if (m.factor(b.f).is_quaternion())
          seg.setZero();  // tangent increment, always evaluated at 0
        else
          seg = fs.lie.mean.coords;
        break;
      }
      case BlockTarget::cond_scale: {
        const FactorState& fs = model.vstate.conditions[std::size_t(b.j)][std::size_t(b.f)];
        if (fs.is_vmf)
          seg[0] = fs.vmf.log_kappa;
        else
          seg = fs.lie.base.params();
        break;
      }
      case BlockTarget::hyper: {
        const GPHyper& h = model.hypers[std::size_t(b.i)];
        seg[0] = h.kernel.log_alpha;
        seg.segment(1, h.kernel.log_ell.size()) = h.kernel.log_ell;
        seg[b.size - 1] = h.log_sigma;
        break;
      }
      case BlockTarget::inducing: {
        const MatrixXd& Z = model.inducing[std::size_t(b.i)].points;
        for (int r = 0; r < Z.rows(); ++r)
          seg.segment(r * m.ambient(), m.ambient()) = Z.row(r).transpose();
        break;
      }
    }
  }
  return p;
}

/// Functional parameter application: returns a copy of the model whose state
/// is `params` (tangent increments composed onto quaternion means, angles
/// wrapped, unit vectors renormalized).
inline MGplvmModel with_params(const MGplvmModel& model, const ParamLayout& lay,
                               const VectorXd& params) {
  check(params.size() == lay.total, "parameter vector size mismatch");
  MGplvmModel out = model;
  const Manifold& m = model.manifold;
  for (const auto& b : lay.blocks) {
    auto seg = params.segment(b.offset, b.size);
    switch (b.target) {
      case BlockTarget::cond_mean: {
        FactorState& fs = out.vstate.conditions[std::size_t(b.j)][std::size_t(b.f)];
        const Manifold& fac = m.factor(b.f);
        if (fs.is_vmf) {
          Eigen::Vector3d raw = seg;
          double n = raw.norm();
          check(n > 0, "vmf mean collapsed to zero");
          fs.vmf.mean_raw = raw / n;
        } else if (fac.is_quaternion()) {
          Element inc = exp_map(fac, Tangent{VectorXd(seg)});
          fs.lie.mean = group_mul(fac, fs.lie.mean, inc);
        } else if (fac.kind() == ManifoldKind::torus) {
          VectorXd c = seg;
          for (int t = 0; t < c.size(); ++t) c[t] = wrap_2pi(c[t]);
          fs.lie.mean.coords = c;
        } else {
          fs.lie.mean.coords = seg;
        }
        break;
      }
      case BlockTarget::cond_scale: {
        FactorState& fs = out.vstate.conditions[std::size_t(b.j)][std::size_t(b.f)];
        if (fs.is_vmf)
          fs.vmf.log_kappa = seg[0];
        else
          fs.lie.base.set_params(seg);
        break;
      }
      case BlockTarget::hyper: {
        GPHyper& h = out.hypers[std::size_t(b.i)];
        h.kernel.log_alpha = seg[0];
        h.kernel.log_ell = seg.segment(1, h.kernel.log_ell.size());
        h.log_sigma = seg[b.size - 1];
        break;
      }
      case BlockTarget::inducing: {
        MatrixXd& Z = out.inducing[std::size_t(b.i)].points;
        for (int r = 0; r < Z.rows(); ++r) {
          VectorXd row = seg.segment(r * m.ambient(), m.ambient());
          project_coords(m, row);
          Z.row(r) = row.transpose();
        }
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss (negative MC ELBO, Eq.-10-style assembly)

struct LossTerms {
  double entropy = 0, prior = 0, lik = 0;
  double loss() const { return -(entropy + prior + lik); }
};

namespace detail {

inline double prior_terms(const MGplvmModel& model, const SampleBatch& batch,
                          std::vector<MatrixXd>* dcoords /* per k, M x ambient */) {
  const Manifold& m = model.manifold;
  double prior = 0;
  for (int f = 0; f < m.n_factors(); ++f) {
    const Manifold& fac = m.factor(f);
    if (fac.bounded()) {
      prior += model.M * uniform_log_prior(fac);
    } else {
      int off = m.coord_offset(f);
      double inv_k = 1.0 / batch.K;
      for (int k = 0; k < batch.K; ++k) {
        auto slice = batch.coords[std::size_t(k)].middleCols(off, fac.ambient());
        prior += inv_k * (-0.5 * slice.squaredNorm() -
                          0.5 * batch.M * fac.dim() * kLog2Pi);
        if (dcoords)
          (*dcoords)[std::size_t(k)].middleCols(off, fac.ambient()) -= inv_k * slice;
      }
    }
  }
  return prior;
}

}  // namespace detail

/// Assemble the loss terms from an existing sample batch (used by tests to
/// check the sign/assembly identity) without gradients.
inline LossTerms loss_terms(const MGplvmModel& model, const Dataset& data,
                            const SampleBatch& batch, int n_threads = 1) {
  LossTerms t;
  t.entropy = entropy_mc(model.vstate, model.manifold, batch);
  t.prior = detail::prior_terms(model, batch, nullptr);
  const int N = data.N(), K = batch.K;
  std::vector<double> per_neuron(std::size_t(N), 0.0);
  parallel_for_striped(N, n_threads, [&](int i, int) {
    SparseGPContext ctx = make_sparse_context(model.hyper(i).kernel,
                                              model.hyper(i).log_sigma, model.manifold,
                                              model.inducing[std::size_t(i)].points);
    double s = 0;
    VectorXd y = data.Y.row(i);
    for (int k = 0; k < K; ++k) s += titsias_bound_ctx(ctx, y, batch.coords[std::size_t(k)]);
    per_neuron[std::size_t(i)] = s / K;
  });
  for (double v : per_neuron) t.lik += v;
  return t;
}

/// Loss and (optionally) its gradient w.r.t. the flat parameter vector, at
/// fixed base draws (pathwise estimator). `entropy_off` implements the
/// warm-up schedule.
inline LossTerms loss_eval(const MGplvmModel& model, const Dataset& data,
                           const BaseDraws& draws, bool entropy_off, int n_threads,
                           const ParamLayout* lay = nullptr, VectorXd* grad = nullptr) {
  const Manifold& m = model.manifold;
  const int K = draws.K, M = draws.M, N = data.N(), F = m.n_factors();
  check(M == model.M && M == data.M(), "loss: condition count mismatch");

  SamplePaths paths;
  SampleBatch batch = sample_with(model.vstate, m, draws, model.k_max,
                                  grad ? &paths : nullptr);

  VectorXd gU;  // gradient of (entropy + prior + lik); loss grad = -gU
  if (grad) gU = VectorXd::Zero(lay->total);

  LossTerms terms;

  // --- entropy
  std::vector<std::vector<bool>> capped;
  MatrixXd H = entropy_breakdown(model.vstate, m, batch, &capped);
  if (!entropy_off) {
    terms.entropy = H.sum();
    if (grad) {
      for (int j = 0; j < M; ++j)
        for (int f = 0; f < F; ++f) {
          const FactorState& fs = model.vstate.conditions[std::size_t(j)][std::size_t(f)];
          const ParamBlock& sb = lay->scale_block(j, f);
          auto gseg = gU.segment(sb.offset, sb.size);
          if (fs.is_vmf) {
            double kap = fs.vmf.kappa();
            gseg[0] += kap * vmf_entropy_dkappa(kap);
          } else if (m.factor(f).kind() == ManifoldKind::euclidean) {
            gseg.head(m.factor(f).dim()).array() += 1.0;  // d/d log_diag of log|L|
          } else if (!capped[std::size_t(j)][std::size_t(f)]) {
            int doff = factor_draw_offset(m, f);
            int d = m.factor(f).dim();
            for (int k = 0; k < K; ++k) {
              const FactorPathGrad& pg = paths(k, j, f, F);
              VectorXd eps =
                  draws.eps[std::size_t(k)].row(j).segment(doff, d).transpose();
              gseg -= fs.lie.base.chain_scale(pg.logq.dL, pg.logq.dx, eps) / K;
            }
          }
        }
    }
  }

  // --- prior (+ its dcoords contributions)
  std::vector<MatrixXd> dcoords;
  if (grad) dcoords.assign(std::size_t(K), MatrixXd::Zero(M, m.ambient()));
  terms.prior = detail::prior_terms(model, batch, grad ? &dcoords : nullptr);

  // --- GP likelihood
  int workers = std::max(1, std::min(n_threads, N));
  std::vector<double> lik_per_neuron(std::size_t(N), 0.0);
  // per-worker coordinate adjoints; reduced in worker order for determinism
  std::vector<std::vector<MatrixXd>> worker_dcoords;
  std::vector<std::vector<VectorXd>> worker_dhyp;  // tied: accumulate per worker
  std::vector<MatrixXd> dZ(grad ? std::size_t(N) : 0);
  int n_ell = int(model.hypers[0].kernel.log_ell.size());
  if (grad) {
    worker_dcoords.assign(std::size_t(workers),
                          std::vector<MatrixXd>(std::size_t(K), MatrixXd::Zero(M, m.ambient())));
    worker_dhyp.assign(std::size_t(workers),
                       std::vector<VectorXd>(model.tie_params ? 1 : std::size_t(N),
                                             VectorXd::Zero(2 + n_ell)));
  }

  parallel_for_striped(N, workers, [&](int i, int w) {
    const GPHyper& h = model.hyper(i);
    SparseGPContext ctx = make_sparse_context(h.kernel, h.log_sigma, m,
                                              model.inducing[std::size_t(i)].points);
    VectorXd y = data.Y.row(i);
    double s = 0;
    if (!grad) {
      for (int k = 0; k < K; ++k) s += titsias_bound_ctx(ctx, y, batch.coords[std::size_t(k)]);
    } else {
      BoundGrads bg;
      bg.init(h.kernel, M, ctx.Z.rows(), m.ambient());
      for (int k = 0; k < K; ++k) {
        bg.dX.setZero();
        s += titsias_bound_ctx(ctx, y, batch.coords[std::size_t(k)], &bg);
        worker_dcoords[std::size_t(w)][std::size_t(k)] += bg.dX / K;
      }
      dZ[std::size_t(i)] = bg.dZ / K;
      VectorXd hg(2 + n_ell);
      hg[0] = bg.dlog_alpha;
      hg.segment(1, n_ell) = bg.dlog_ell;
      hg[1 + n_ell] = bg.dlog_sigma;
      worker_dhyp[std::size_t(w)][model.tie_params ? 0 : std::size_t(i)] += hg / K;
    }
    lik_per_neuron[std::size_t(i)] = s / K;
  });
  for (double v : lik_per_neuron) terms.lik += v;

  if (grad) {
    // ordered reduction of worker-local adjoints
    for (int w = 1; w < workers; ++w)
      for (int k = 0; k < K; ++k)
        worker_dcoords[0][std::size_t(k)] += worker_dcoords[std::size_t(w)][std::size_t(k)];
    for (int k = 0; k < K; ++k) dcoords[std::size_t(k)] += worker_dcoords[0][std::size_t(k)];

    // scatter coordinate adjoints through the sampling path
    for (int k = 0; k < K; ++k) {
      for (int j = 0; j < M; ++j) {
        for (int f = 0; f < F; ++f) {
          const Manifold& fac = m.factor(f);
          const FactorState& fs = model.vstate.conditions[std::size_t(j)][std::size_t(f)];
          VectorXd slice = dcoords[std::size_t(k)]
                               .row(j)
                               .segment(m.coord_offset(f), fac.ambient())
                               .transpose();
          if (slice.isZero(0)) continue;
          const FactorPathGrad& pg = paths(k, j, f, F);
          const ParamBlock& mb = lay->mean_block(j, f);
          const ParamBlock& sb = lay->scale_block(j, f);
          if (fs.is_vmf) {
            gU.segment(mb.offset, 3) += pg.d_coords_dmean.transpose() * slice;
            gU[sb.offset] += pg.d_coords_dlogkappa.dot(slice);
          } else {
            gU.segment(mb.offset, mb.size) += pg.d_coords_dmean.transpose() * slice;
            VectorXd dx = pg.d_coords_dx.transpose() * slice;
            int doff = factor_draw_offset(m, f);
            VectorXd eps = draws.eps[std::size_t(k)]
                               .row(j)
                               .segment(doff, fac.dim())
                               .transpose();
            gU.segment(sb.offset, sb.size) +=
                fs.lie.base.chain_scale(MatrixXd(), dx, eps);
          }
        }
      }
    }

    // hyperparameters
    for (int w = 1; w < workers; ++w)
      for (std::size_t i = 0; i < worker_dhyp[0].size(); ++i)
        worker_dhyp[0][i] += worker_dhyp[std::size_t(w)][i];
    for (std::size_t i = 0; i < model.hypers.size(); ++i) {
      const ParamBlock& hb = lay->hyper_block(int(i));
      gU.segment(hb.offset, hb.size) += worker_dhyp[0][i];
    }

    // inducing coordinates: normalize-on-use Jacobian for unit-vector factors
    for (int i = 0; i < N; ++i) {
      const ParamBlock& zb = lay->inducing_block(i);
      const MatrixXd& Z = model.inducing[std::size_t(i)].points;
      MatrixXd dzi = dZ[std::size_t(i)];
      for (int r = 0; r < Z.rows(); ++r) {
        for (int f = 0; f < F; ++f) {
          const Manifold& fac = m.factor(f);
          if (fac.is_quaternion() || fac.kind() == ManifoldKind::sphere2) {
            VectorXd z = Z.row(r).segment(m.coord_offset(f), fac.ambient()).transpose();
            VectorXd g = dzi.row(r).segment(m.coord_offset(f), fac.ambient()).transpose();
            dzi.row(r).segment(m.coord_offset(f), fac.ambient()) =
                (g - z * z.dot(g)).transpose();  // (I - zz^T) g at |z| = 1
          }
        }
        gU.segment(zb.offset + r * m.ambient(), m.ambient()) += dzi.row(r).transpose();
      }
    }

    *grad = -gU;  // loss = -(entropy + prior + lik)
  }

  if (entropy_off) terms.entropy = 0;
  return terms;
}

/// Spec-facing loss: draws a fresh batch with K Monte-Carlo samples.
inline double loss(const MGplvmModel& model, const Dataset& data, int K, Rng& rng,
                   int n_threads = 1) {
  check(K >= 1, "loss: K must be >= 1");
  BaseDraws draws = draw_base(model.manifold, model.M, K, rng.stream(rng.next_u64()));
  return loss_eval(model, data, draws, false, n_threads).loss();
}

// ---------------------------------------------------------------------------
// Posterior over tuning curves and importance-weighted likelihood

struct TuningPosterior {
  std::vector<Element> queries;
  VectorXd mean;      // per query
  VectorXd sd;        // per query
  MatrixXd samples;   // K x |queries| (draws used for the estimate)
};

inline TuningPosterior posterior_tuning(const MGplvmModel& model, const Dataset& data,
                                        int neuron, const std::vector<Element>& queries,
                                        int K, Rng& rng) {
  check(neuron >= 0 && neuron < data.N(), "posterior_tuning: neuron index out of range");
  check(K >= 1, "posterior_tuning: K must be >= 1");
  const Manifold& m = model.manifold;
  BaseDraws draws = draw_base(m, model.M, K, rng.stream(rng.next_u64()));
  SampleBatch batch = sample_with(model.vstate, m, draws, model.k_max);

  const GPHyper& h = model.hyper(neuron);
  SparseGPContext ctx = make_sparse_context(h.kernel, h.log_sigma, m,
                                            model.inducing[std::size_t(neuron)].points);
  MatrixXd Q = coords_matrix(m, queries);
  VectorXd y = data.Y.row(neuron);
  int nq = int(queries.size());

  TuningPosterior post;
  post.queries = queries;
  post.samples.resize(K, nq);
  Rng noise = rng.stream(0x7e57ULL);
  VectorXd mean, var;
  for (int k = 0; k < K; ++k) {
    sparse_predict_ctx(ctx, y, batch.coords[std::size_t(k)], Q, mean, var);
    for (int q = 0; q < nq; ++q)
      post.samples(k, q) = mean[q] + std::sqrt(var[q]) * noise.normal();
  }
  post.mean = post.samples.colwise().mean().transpose();
  post.sd.resize(nq);
  for (int q = 0; q < nq; ++q) {
    double mu = post.mean[q];
    double ss = (post.samples.col(q).array() - mu).square().sum();
    post.sd[q] = std::sqrt(ss / std::max(1, K - 1));
  }
  return post;
}

/// log (1/K) sum_k exp( sum_i log p~(y_i | G_k) + log p(G_k) - log Q(G_k) ),
/// G_k drawn from the fitted variational distribution.
inline double iw_log_likelihood(const MGplvmModel& model, const Dataset& data, int K,
                                Rng& rng, int n_threads = 1) {
  check(K >= 2, "iw_log_likelihood: K must be >= 2");
  const Manifold& m = model.manifold;
  BaseDraws draws = draw_base(m, model.M, K, rng.stream(rng.next_u64()));
  SampleBatch batch = sample_with(model.vstate, m, draws, model.k_max);

  std::vector<double> w(std::size_t(K), 0.0);
  // prior and entropy-like terms
  double bounded_prior = 0;
  for (int f = 0; f < m.n_factors(); ++f)
    if (m.factor(f).bounded()) bounded_prior += model.M * uniform_log_prior(m.factor(f));
  for (int k = 0; k < K; ++k) {
    double lp = bounded_prior;
    for (int f = 0; f < m.n_factors(); ++f) {
      const Manifold& fac = m.factor(f);
      if (!fac.bounded()) {
        auto slice =
            batch.coords[std::size_t(k)].middleCols(m.coord_offset(f), fac.ambient());
        lp += -0.5 * slice.squaredNorm() - 0.5 * model.M * fac.dim() * kLog2Pi;
      }
    }
    w[std::size_t(k)] = lp - batch.log_q.row(k).sum();
  }

  const int N = data.N();
  std::vector<VectorXd> per_neuron(static_cast<std::size_t>(N));
  parallel_for_striped(N, n_threads, [&](int i, int) {
    SparseGPContext ctx = make_sparse_context(model.hyper(i).kernel,
                                              model.hyper(i).log_sigma, m,
                                              model.inducing[std::size_t(i)].points);
    VectorXd y = data.Y.row(i);
    VectorXd b(K);
    for (int k = 0; k < K; ++k) b[k] = titsias_bound_ctx(ctx, y, batch.coords[std::size_t(k)]);
    per_neuron[std::size_t(i)] = b;
  });
  for (int i = 0; i < N; ++i)
    for (int k = 0; k < K; ++k) w[std::size_t(k)] += per_neuron[std::size_t(i)][k];

  return log_sum_exp(w.data(), K) - std::log(double(K));
}

// ---------------------------------------------------------------------------
// Checkpoint serialization (JSON; float64 values round-trip exactly)

inline nlohmann::json model_to_json(const MGplvmModel& model) {
  using nlohmann::json;
  json j;
  j["format"] = "mgplvm-checkpoint-v1";
  j["manifold"] = model.manifold.tag();
  j["N"] = model.N;
  j["M"] = model.M;
  j["tie_params"] = model.tie_params;
  j["k_max"] = model.k_max;

  json conds = json::array();
  for (int c = 0; c < model.M; ++c) {
    json cj = json::array();
    for (int f = 0; f < model.manifold.n_factors(); ++f) {
      const FactorState& fs = model.vstate.conditions[std::size_t(c)][std::size_t(f)];
      json fj;
      if (fs.is_vmf) {
        fj["kind"] = "vmf";
        fj["mean"] = std::vector<double>(fs.vmf.mean_raw.data(), fs.vmf.mean_raw.data() + 3);
        fj["log_kappa"] = fs.vmf.log_kappa;
      } else {
        fj["kind"] = "gauss";
        fj["mean"] = std::vector<double>(fs.lie.mean.coords.data(),
                                         fs.lie.mean.coords.data() + fs.lie.mean.coords.size());
        fj["log_diag"] = std::vector<double>(fs.lie.base.log_diag.data(),
                                             fs.lie.base.log_diag.data() + fs.lie.base.dim());
        fj["diagonal_only"] = fs.lie.base.diagonal_only;
        if (!fs.lie.base.diagonal_only) {
          std::vector<double> low;
          for (int a = 1; a < fs.lie.base.dim(); ++a)
            for (int b = 0; b < a; ++b) low.push_back(fs.lie.base.lower(a, b));
          fj["lower"] = low;
        }
      }
      cj.push_back(fj);
    }
    conds.push_back(cj);
  }
  j["vstate"] = conds;

  json hyps = json::array();
  for (const auto& h : model.hypers) {
    json hj;
    hj["log_alpha"] = h.kernel.log_alpha;
    hj["log_ell"] = std::vector<double>(h.kernel.log_ell.data(),
                                        h.kernel.log_ell.data() + h.kernel.log_ell.size());
    hj["ard"] = h.kernel.ard;
    hj["log_sigma"] = h.log_sigma;
    hyps.push_back(hj);
  }
  j["hypers"] = hyps;

  json zs = json::array();
  for (const auto& z : model.inducing) {
    json rows = json::array();
    for (int r = 0; r < z.points.rows(); ++r)
      rows.push_back(std::vector<double>(z.points.row(r).data(),
                                         z.points.row(r).data() + z.points.cols()));
    zs.push_back(rows);
  }
  j["inducing"] = zs;
  return j;
}

inline MGplvmModel model_from_json(const nlohmann::json& j) {
  check(j.value("format", "") == "mgplvm-checkpoint-v1", "unrecognized checkpoint format");
  MGplvmModel model;
  model.manifold = Manifold::parse(j.at("manifold").get<std::string>());
  model.N = j.at("N").get<int>();
  model.M = j.at("M").get<int>();
  model.tie_params = j.at("tie_params").get<bool>();
  model.k_max = j.at("k_max").get<std::vector<int>>();
  const Manifold& m = model.manifold;

  for (const auto& cj : j.at("vstate")) {
    std::vector<FactorState> cond;
    for (int f = 0; f < m.n_factors(); ++f) {
      const auto& fj = cj.at(std::size_t(f));
      FactorState fs;
      if (fj.at("kind") == "vmf") {
        fs.is_vmf = true;
        auto mv = fj.at("mean").get<std::vector<double>>();
        fs.vmf.mean_raw = Eigen::Vector3d(mv[0], mv[1], mv[2]);
        fs.vmf.log_kappa = fj.at("log_kappa").get<double>();
      } else {
        fs.is_vmf = false;
        auto mv = fj.at("mean").get<std::vector<double>>();
        fs.lie.mean.coords = Eigen::Map<const VectorXd>(mv.data(), long(mv.size()));
        auto dv = fj.at("log_diag").get<std::vector<double>>();
        fs.lie.base.log_diag = Eigen::Map<const VectorXd>(dv.data(), long(dv.size()));
        fs.lie.base.diagonal_only = fj.at("diagonal_only").get<bool>();
        fs.lie.base.lower = MatrixXd::Zero(fs.lie.base.dim(), fs.lie.base.dim());
        if (!fs.lie.base.diagonal_only) {
          auto lv = fj.at("lower").get<std::vector<double>>();
          std::size_t idx = 0;
          for (int a = 1; a < fs.lie.base.dim(); ++a)
            for (int b = 0; b < a; ++b) fs.lie.base.lower(a, b) = lv[idx++];
        }
      }
      cond.push_back(fs);
    }
    model.vstate.conditions.push_back(cond);
  }

  for (const auto& hj : j.at("hypers")) {
    GPHyper h;
    h.kernel.log_alpha = hj.at("log_alpha").get<double>();
    auto le = hj.at("log_ell").get<std::vector<double>>();
    h.kernel.log_ell = Eigen::Map<const VectorXd>(le.data(), long(le.size()));
    h.kernel.ard = hj.at("ard").get<bool>();
    h.log_sigma = hj.at("log_sigma").get<double>();
    model.hypers.push_back(h);
  }

  for (const auto& zj : j.at("inducing")) {
    InducingSet z;
    z.points.resize(long(zj.size()), m.ambient());
    for (std::size_t r = 0; r < zj.size(); ++r) {
      auto rv = zj.at(r).get<std::vector<double>>();
      check(int(rv.size()) == m.ambient(), "checkpoint inducing width mismatch");
      for (int c = 0; c < m.ambient(); ++c) z.points(long(r), c) = rv[std::size_t(c)];
    }
    model.inducing.push_back(z);
  }
  return model;
}

}  // namespace mgplvm
