#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "mgplvm/model.hpp"
#include "mgplvm/train.hpp"

namespace mgplvm {

// ---------------------------------------------------------------------------
// Circular statistics helpers

inline double circular_mean(const VectorXd& a) {
  double s = a.array().sin().sum();
  double c = a.array().cos().sum();
  return std::atan2(s, c);
}

/// Jammalamadaka-SarmaRao circular correlation coefficient.
inline double circular_correlation(const VectorXd& a, const VectorXd& b) {
  check(a.size() == b.size() && a.size() >= 2, "circular_correlation: size mismatch");
  double ma = circular_mean(a), mb = circular_mean(b);
  Eigen::ArrayXd sa = (a.array() - ma).sin();
  Eigen::ArrayXd sb = (b.array() - mb).sin();
  double num = (sa * sb).sum();
  double den = std::sqrt(sa.square().sum() * sb.square().sum());
  return den > 0 ? num / den : 0.0;
}

inline double pearson_correlation(const VectorXd& a, const VectorXd& b) {
  check(a.size() == b.size() && a.size() >= 2, "pearson_correlation: size mismatch");
  Eigen::ArrayXd da = a.array() - a.mean();
  Eigen::ArrayXd db = b.array() - b.mean();
  double den = std::sqrt(da.square().sum() * db.square().sum());
  return den > 0 ? (da * db).sum() / den : 0.0;
}

// ---------------------------------------------------------------------------
// Cross-validation split

struct CvSplit {
  std::vector<int> train_conditions, test_conditions;
  std::vector<int> train_neurons, test_neurons;
  std::uint64_t seed = 0;
};

inline CvSplit make_split(const Dataset& data, std::uint64_t seed) {
  check(data.N() >= 2, "make_split: need at least 2 neurons");
  check(data.M() >= 4, "make_split: need at least 4 conditions");
  CvSplit s;
  s.seed = seed;
  auto halves = [&](int n, std::uint64_t stream, std::vector<int>& train,
                    std::vector<int>& test) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[std::size_t(i)] = i;
    Rng rng = Rng(seed).stream(stream);
    for (int i = n - 1; i > 0; --i) std::swap(idx[std::size_t(i)], idx[std::size_t(rng.uniform_int(i + 1))]);
    int n_train = (n + 1) / 2;
    train.assign(idx.begin(), idx.begin() + n_train);
    test.assign(idx.begin() + n_train, idx.end());
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
  };
  halves(data.M(), 0xc0ed5ULL, s.train_conditions, s.test_conditions);
  halves(data.N(), 0x2e04ULL, s.train_neurons, s.test_neurons);
  return s;
}

// ---------------------------------------------------------------------------
// Alignment: a single distance-preserving transform minimizing the average
// geodesic distance between two point clouds.

struct FactorTransform {
  enum class Kind { torus, orthogonal, euclidean } kind = Kind::torus;
  VectorXd signs, offsets;  // torus: g -> (sign * g + offset) mod 2pi
  MatrixXd rotation;        // orthogonal / euclidean
  VectorXd translation;     // euclidean only
};

struct Alignment {
  std::vector<FactorTransform> factors;
  double mean_geodesic_error = 0;
};

namespace detail {

inline VectorXd apply_factor_transform(const FactorTransform& t, const Manifold& f,
                                       const VectorXd& coords) {
  switch (t.kind) {
    case FactorTransform::Kind::torus: {
      VectorXd out(coords.size());
      for (int r = 0; r < coords.size(); ++r)
        out[r] = wrap_2pi(t.signs[r] * coords[r] + t.offsets[r]);
      return out;
    }
    case FactorTransform::Kind::orthogonal:
      return t.rotation * coords;
    case FactorTransform::Kind::euclidean:
      return t.rotation * coords + t.translation;
  }
  (void)f;
  return coords;
}

// 1-d periodic offset fit: grid scan + golden-section refinement.
inline double fit_offset(const VectorXd& src, const VectorXd& dst) {
  auto objective = [&](double beta) {
    double s = 0;
    for (int j = 0; j < src.size(); ++j) s += std::abs(wrap_pi(src[j] + beta - dst[j]));
    return s / double(src.size());
  };
  const int n_grid = 256;
  double best_beta = 0, best = objective(0);
  for (int i = 1; i < n_grid; ++i) {
    double beta = kTwoPi * i / n_grid;
    double v = objective(beta);
    if (v < best) {
      best = v;
      best_beta = beta;
    }
  }
  double lo = best_beta - kTwoPi / n_grid, hi = best_beta + kTwoPi / n_grid;
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
  double f1 = objective(x1), f2 = objective(x2);
  for (int it = 0; it < 60; ++it) {
    if (f1 < f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - gr * (hi - lo);
      f1 = objective(x1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + gr * (hi - lo);
      f2 = objective(x2);
    }
  }
  double mid = 0.5 * (lo + hi);
  return objective(mid) <= best ? wrap_2pi(mid) : best_beta;
}

inline FactorTransform align_torus_factor(const Manifold& f, const MatrixXd& A,
                                          const MatrixXd& T) {
  int n = f.dim();
  FactorTransform best;
  double best_err = std::numeric_limits<double>::infinity();
  for (int mask = 0; mask < (1 << n); ++mask) {
    FactorTransform cand;
    cand.kind = FactorTransform::Kind::torus;
    cand.signs.resize(n);
    cand.offsets.resize(n);
    for (int r = 0; r < n; ++r) {
      cand.signs[r] = (mask >> r) & 1 ? -1.0 : 1.0;
      cand.offsets[r] = fit_offset(cand.signs[r] * A.col(r), T.col(r));
    }
    double err = 0;
    for (int j = 0; j < A.rows(); ++j) {
      VectorXd g = apply_factor_transform(cand, f, A.row(j).transpose());
      err += geodesic_distance(f, Element{g}, Element{VectorXd(T.row(j).transpose())});
    }
    err /= double(A.rows());
    if (err < best_err) {
      best_err = err;
      best = cand;
    }
  }
  return best;
}

/// Orthogonal Procrustes R = argmin sum |R a_j - t_j|^2 over O(d); closed
/// form from the SVD of sum t_j a_j^T. SO(3) gets a quaternion-sign
/// refinement loop (q and -q denote the same rotation).
inline FactorTransform align_orthogonal_factor(const Manifold& f, const MatrixXd& A,
                                               const MatrixXd& T) {
  int d = f.ambient();
  bool sign_aware = f.kind() == ManifoldKind::so3;
  VectorXd s = VectorXd::Ones(A.rows());
  MatrixXd R;
  for (int round = 0; round < (sign_aware ? 10 : 1); ++round) {
    MatrixXd Mm = MatrixXd::Zero(d, d);
    for (int j = 0; j < A.rows(); ++j)
      Mm += s[j] * T.row(j).transpose() * A.row(j);
    Eigen::JacobiSVD<MatrixXd> svd(Mm, Eigen::ComputeFullU | Eigen::ComputeFullV);
    R = svd.matrixU() * svd.matrixV().transpose();
    if (!sign_aware) break;
    bool changed = false;
    for (int j = 0; j < A.rows(); ++j) {
      double dot = (R * A.row(j).transpose()).dot(T.row(j).transpose());
      double ns = dot >= 0 ? 1.0 : -1.0;
      if (ns != s[j]) {
        s[j] = ns;
        changed = true;
      }
    }
    if (!changed) break;
  }
  FactorTransform out;
  out.kind = FactorTransform::Kind::orthogonal;
  out.rotation = R;
  return out;
}

inline FactorTransform align_euclidean_factor(const MatrixXd& A, const MatrixXd& T) {
  int d = int(A.cols());
  VectorXd ma = A.colwise().mean(), mt = T.colwise().mean();
  MatrixXd Ac = A.rowwise() - ma.transpose();
  MatrixXd Tc = T.rowwise() - mt.transpose();
  MatrixXd Mm = Tc.transpose() * Ac;
  Eigen::JacobiSVD<MatrixXd> svd(Mm, Eigen::ComputeFullU | Eigen::ComputeFullV);
  FactorTransform out;
  out.kind = FactorTransform::Kind::euclidean;
  out.rotation = svd.matrixU() * svd.matrixV().transpose();
  out.translation = mt - out.rotation * ma;
  (void)d;
  return out;
}

}  // namespace detail

inline Element apply_alignment(const Alignment& al, const Manifold& m, const Element& e) {
  Element out;
  out.coords.resize(m.ambient());
  for (int f = 0; f < m.n_factors(); ++f) {
    VectorXd c = e.coords.segment(m.coord_offset(f), m.factor(f).ambient());
    out.coords.segment(m.coord_offset(f), m.factor(f).ambient()) =
        detail::apply_factor_transform(al.factors[std::size_t(f)], m.factor(f), c);
  }
  return out;
}

inline Alignment align_latents(const Manifold& m, const std::vector<Element>& means,
                               const std::vector<Element>& targets) {
  check(means.size() == targets.size() && !means.empty(),
        "align_latents: cloud size mismatch");
  Alignment al;
  for (int f = 0; f < m.n_factors(); ++f) {
    const Manifold& fac = m.factor(f);
    MatrixXd A(means.size(), fac.ambient()), T(targets.size(), fac.ambient());
    for (std::size_t j = 0; j < means.size(); ++j) {
      A.row(long(j)) = means[j].coords.segment(m.coord_offset(f), fac.ambient());
      T.row(long(j)) = targets[j].coords.segment(m.coord_offset(f), fac.ambient());
    }
    switch (fac.kind()) {
      case ManifoldKind::torus:
        al.factors.push_back(detail::align_torus_factor(fac, A, T));
        break;
      case ManifoldKind::euclidean:
        al.factors.push_back(detail::align_euclidean_factor(A, T));
        break;
      default:
        al.factors.push_back(detail::align_orthogonal_factor(fac, A, T));
        break;
    }
  }
  double err = 0;
  for (std::size_t j = 0; j < means.size(); ++j)
    err += geodesic_distance(m, apply_alignment(al, m, means[j]), targets[j]);
  al.mean_geodesic_error = err / double(means.size());
  return al;
}

// ---------------------------------------------------------------------------
// Cross-validated manifold comparison

struct CompareRow {
  std::string manifold;
  std::uint64_t seed = 0;
  double mse = 0, nll = 0, iw_ll = 0;
  bool ok = false;
  std::string status = "ok";
};

namespace detail {

inline Dataset subset(const Dataset& d, const std::vector<int>& rows,
                      const std::vector<int>& cols) {
  Dataset out;
  out.Y.resize(long(rows.size()), long(cols.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j)
      out.Y(long(i), long(j)) = d.Y(rows[i], cols[j]);
  return out;
}

inline std::vector<int> all_indices(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[std::size_t(i)] = i;
  return v;
}

}  // namespace detail

/// Three-stage protocol:
///  (1) fit the full model on the training conditions (all neurons),
///  (2) with hyperparameters and inducing points frozen, infer latents for
///      the held-out conditions from the training neurons only,
///  (3) predict the held-out neurons at the held-out conditions.
/// Stages (1)-(2) never see the held-out (neuron, condition) cells.
inline CompareRow crossval_score(const Dataset& data, const Manifold& manifold,
                                 const CvSplit& split, const FitConfig& cfg) {
  CompareRow row;
  row.manifold = manifold.tag();
  row.seed = split.seed;

  // stage 1: hyperparameters + inducing sets + train-condition latents
  Dataset train_data = detail::subset(data, detail::all_indices(data.N()),
                                      split.train_conditions);
  FitConfig cfg1 = cfg;
  cfg1.seed = Rng::mix(cfg.seed, split.seed);
  Rng rng1(cfg1.seed);
  MGplvmModel m1 = make_model(manifold, train_data, cfg1.model_config(), rng1);
  FitReport rep1 = fit(m1, train_data, cfg1);
  if (rep1.aborted) {
    row.status = "stage1: " + rep1.message;
    return row;
  }

  // stage 2: held-out-condition latents from training neurons, globals frozen
  Dataset test_data = detail::subset(data, split.train_neurons, split.test_conditions);
  FitConfig cfg2 = cfg;
  cfg2.seed = Rng::mix(cfg.seed, split.seed + 1);
  cfg2.freeze_globals = true;
  Rng rng2(cfg2.seed);
  MGplvmModel m2 = make_model(manifold, test_data, cfg2.model_config(), rng2);
  if (cfg.tie_params) {
    m2.hypers = rep1.model.hypers;
  } else {
    m2.hypers.clear();
    for (int i : split.train_neurons) m2.hypers.push_back(rep1.model.hypers[std::size_t(i)]);
  }
  m2.inducing.clear();
  for (int i : split.train_neurons)
    m2.inducing.push_back(rep1.model.inducing[std::size_t(i)]);
  FitReport rep2 = fit(m2, test_data, cfg2);
  if (rep2.aborted) {
    row.status = "stage2: " + rep2.message;
    return row;
  }

  // stage 3: predict held-out neurons at held-out conditions
  std::vector<Element> train_latents = rep1.model.mean_elements();
  std::vector<Element> test_latents = rep2.model.mean_elements();
  double se = 0, nll = 0;
  int cells = 0;
  for (int i : split.test_neurons) {
    const GPHyper& h = rep1.model.hyper(i);
    VectorXd y_train(long(split.train_conditions.size()));
    for (std::size_t j = 0; j < split.train_conditions.size(); ++j)
      y_train[long(j)] = data.Y(i, split.train_conditions[j]);
    VectorXd mean, var;
    sparse_predict(y_train, train_latents, rep1.model.inducing[std::size_t(i)], h,
                   manifold, test_latents, mean, var);
    double s2 = h.sigma_sq();
    for (std::size_t j = 0; j < split.test_conditions.size(); ++j) {
      double y = data.Y(i, split.test_conditions[j]);
      double v = var[long(j)] + s2;
      se += sqr(y - mean[long(j)]);
      nll += 0.5 * std::log(kTwoPi * v) + sqr(y - mean[long(j)]) / (2.0 * v);
      ++cells;
    }
  }
  row.mse = se / cells;
  row.nll = nll / cells;

  // reporting-time evidence estimate on the assembled model (train latents
  // from stage 1, held-out-condition latents from stage 2)
  MGplvmModel full = rep1.model;
  full.M = data.M();
  full.N = data.N();
  full.vstate.conditions.assign(std::size_t(data.M()), {});
  for (std::size_t j = 0; j < split.train_conditions.size(); ++j)
    full.vstate.conditions[std::size_t(split.train_conditions[j])] =
        rep1.model.vstate.conditions[j];
  for (std::size_t j = 0; j < split.test_conditions.size(); ++j)
    full.vstate.conditions[std::size_t(split.test_conditions[j])] =
        rep2.model.vstate.conditions[j];
  Rng rng3(Rng::mix(cfg.seed, split.seed + 2));
  row.iw_ll = iw_log_likelihood(full, data, 64, rng3, cfg.n_threads());

  row.ok = true;
  return row;
}

}  // namespace mgplvm
