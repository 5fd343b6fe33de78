#pragma once

#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

#include "mgplvm/model.hpp"

namespace mgplvm {

struct FitConfig {
  int iters = 2500;
  int warmup_iters = 250;
  double learning_rate = 5e-3;
  int mc_samples = 20;  // K
  std::uint64_t seed = 0;
  int k_max = 0;  // 0 = per-factor defaults
  bool tie_params = true;
  int m_inducing = 20;
  bool ard = false;
  bool full_scale = false;
  int threads = 0;             // 0 = hardware concurrency
  bool freeze_globals = false;  // hold hypers + inducing fixed (held-out latent inference)

  ModelConfig model_config() const {
    ModelConfig mc;
    mc.m_inducing = m_inducing;
    mc.tie_params = tie_params;
    mc.ard = ard;
    mc.full_scale = full_scale;
    mc.k_max_override = k_max;
    return mc;
  }
  int n_threads() const { return threads > 0 ? threads : default_threads(); }
};

inline void validate_fit_config(const FitConfig& c) {
  check(c.iters >= 0 && c.warmup_iters >= 0 && c.iters >= c.warmup_iters,
        "need iters >= warmup_iters >= 0");
  check(c.learning_rate > 0, "learning_rate must be positive");
  check(c.mc_samples >= 1, "mc_samples must be >= 1");
  check(c.m_inducing >= 1, "m_inducing must be >= 1");
}

struct FitReport {
  std::vector<double> loss_trace;
  double wall_time_s = 0;
  MGplvmModel model;
  bool aborted = false;
  std::string message;
};

// ---------------------------------------------------------------------------

struct AdamState {
  VectorXd m, v;
  long t = 0;
};

/// Standard Adam update (beta1 = 0.9, beta2 = 0.999, eps = 1e-8). Manifold
/// projection of the updated parameters is the caller's job (with_params).
inline void adam_step(VectorXd& params, const VectorXd& grad, AdamState& st, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  check(params.size() == grad.size(), "adam_step: shape mismatch");
  if (st.m.size() != params.size()) {
    st.m = VectorXd::Zero(params.size());
    st.v = VectorXd::Zero(params.size());
    st.t = 0;
  }
  st.t += 1;
  st.m = beta1 * st.m + (1.0 - beta1) * grad;
  st.v = beta2 * st.v.array().matrix() + (1.0 - beta2) * grad.array().square().matrix();
  double bc1 = 1.0 - std::pow(beta1, double(st.t));
  double bc2 = 1.0 - std::pow(beta2, double(st.t));
  params.array() -=
      lr * (st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + eps);
}

/// Exact pathwise gradient of the loss at fixed base draws; throws
/// numerical_error (with a parameter summary) on non-finite output.
inline VectorXd gradient(const MGplvmModel& model, const ParamLayout& lay,
                         const Dataset& data, const BaseDraws& draws, bool entropy_off,
                         int n_threads, LossTerms* terms_out = nullptr) {
  VectorXd grad;
  LossTerms t = loss_eval(model, data, draws, entropy_off, n_threads, &lay, &grad);
  if (terms_out) *terms_out = t;
  if (!grad.allFinite()) {
    VectorXd p = get_params(model, lay);
    std::string dump = "non-finite gradient; first parameters:";
    for (int i = 0; i < std::min<int>(8, int(p.size())); ++i)
      dump += " " + std::to_string(p[i]);
    throw numerical_error(dump);
  }
  return grad;
}

/// Full training loop: warm-up phase (entropy off, variational scales and
/// kernel variance frozen), then Adam on every free parameter.
inline FitReport fit(MGplvmModel model, const Dataset& data, const FitConfig& cfg) {
  validate_fit_config(cfg);
  check(model.M == data.M(), "fit: model/data condition mismatch");
  const int threads = cfg.n_threads();
  ParamLayout lay = build_layout(model);
  VectorXd params = get_params(model, lay);
  AdamState adam;
  Rng root(cfg.seed);

  FitReport rep;
  rep.model = model;
  auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  for (int iter = 0; iter < cfg.iters; ++iter) {
    bool warmup = iter < cfg.warmup_iters;
    BaseDraws draws =
        draw_base(model.manifold, model.M, cfg.mc_samples, root.stream(0x17e4, iter));
    LossTerms terms;
    VectorXd grad;
    try {
      grad = gradient(model, lay, data, draws, warmup, threads, &terms);
    } catch (const numerical_error& e) {
      rep.aborted = true;
      rep.message = e.what();
      rep.wall_time_s = elapsed();
      return rep;  // rep.model is the last state with a finite evaluation
    }
    double L = terms.loss();
    if (!std::isfinite(L)) {
      rep.aborted = true;
      rep.message = "non-finite loss at iteration " + std::to_string(iter);
      rep.wall_time_s = elapsed();
      return rep;
    }
    rep.loss_trace.push_back(L);
    rep.model = model;

    if (warmup)
      for (int i = 0; i < lay.total; ++i)
        if (lay.warmup_frozen[std::size_t(i)]) grad[i] = 0;
    if (cfg.freeze_globals)
      for (int i = 0; i < lay.total; ++i)
        if (lay.global_block[std::size_t(i)]) grad[i] = 0;

    adam_step(params, grad, adam, cfg.learning_rate);
    model = with_params(model, lay, params);
    params = get_params(model, lay);  // re-zeroes quaternion increments, wraps angles

    if (iter % 25 == 0)
      std::fprintf(stderr, "iter=%d loss=%.8g elapsed_s=%.3f\n", iter, L, elapsed());
  }
  rep.model = model;
  rep.wall_time_s = elapsed();
  return rep;
}

}  // namespace mgplvm
