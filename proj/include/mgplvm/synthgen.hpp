#pragma once

#include <array>
#include <vector>

#include "mgplvm/manifold.hpp"
#include "mgplvm/model.hpp"
#include "mgplvm/rng.hpp"

namespace mgplvm {

enum class LatentMode { random_walk, uniform };

/// Ground-truth generator configuration. Ranges are sampled uniformly per
/// neuron; a zero width_range means "scale [1/8, 1/2] of the manifold
/// diameter".
struct SynthSpec {
  Manifold manifold = Manifold::torus(1);
  int N = 100;
  int M = 100;
  LatentMode latent_mode = LatentMode::random_walk;
  double walk_step = 0.3;
  std::array<double, 2> amplitude_range{0.5, 1.5};
  std::array<double, 2> width_range{0.0, 0.0};
  std::array<double, 2> offset_range{0.0, 0.2};
  std::array<double, 2> noise_sigma_range{0.1, 0.3};
  std::uint64_t seed = 0;

  std::array<double, 2> effective_width_range() const {
    if (width_range[0] > 0 || width_range[1] > 0) return width_range;
    double d = manifold_diameter(manifold);
    return {d / 8.0, d / 2.0};
  }
};

inline void validate_synth_spec(const SynthSpec& s) {
  check(s.N >= 1 && s.M >= 1, "need N >= 1 and M >= 1");
  check(s.walk_step > 0 || s.latent_mode == LatentMode::uniform,
        "walk_step must be positive for random walks");
  auto rng_ok = [](const std::array<double, 2>& r) { return r[1] >= r[0]; };
  check(rng_ok(s.amplitude_range) && rng_ok(s.offset_range) && rng_ok(s.noise_sigma_range),
        "ranges must satisfy lo <= hi");
  check(s.amplitude_range[0] > 0, "amplitudes must be positive");
}

struct NeuronTuning {
  double a = 1, b = 1, c = 0, sigma = 0.1;
  Element pref;
};

struct SynthDataset {
  Dataset data;
  std::vector<Element> true_latents;
  std::vector<NeuronTuning> true_params;
};

namespace detail {

inline Element walk_step_element(const Manifold& f, const Element& g, double step, Rng& rng) {
  if (f.kind() == ManifoldKind::sphere2) {
    // tangent-plane step + renormalize (S^2 is not a group)
    Eigen::Vector3d cur = g.coords;
    Eigen::Vector3d xi = step * Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
    Eigen::Vector3d t = xi - cur * cur.dot(xi);
    Eigen::Vector3d nxt = cur + t;
    return Element{VectorXd(nxt / nxt.norm())};
  }
  Tangent xi{step * rng.normal_vector(f.dim())};
  return group_mul(f, g, exp_map(f, xi));
}

}  // namespace detail

inline std::vector<Element> gen_latents(const SynthSpec& spec) {
  validate_synth_spec(spec);
  const Manifold& m = spec.manifold;
  Rng rng = Rng(spec.seed).stream(0x1a7e);
  std::vector<Element> out;
  out.reserve(std::size_t(spec.M));
  if (spec.latent_mode == LatentMode::uniform) {
    for (int j = 0; j < spec.M; ++j) out.push_back(sample_uniform(m, rng));
    return out;
  }
  Element g = sample_uniform(m, rng);
  out.push_back(g);
  for (int j = 1; j < spec.M; ++j) {
    Element nxt;
    nxt.coords.resize(m.ambient());
    for (int l = 0; l < m.n_factors(); ++l) {
      Element cur{g.coords.segment(m.coord_offset(l), m.factor(l).ambient())};
      nxt.coords.segment(m.coord_offset(l), m.factor(l).ambient()) =
          detail::walk_step_element(m.factor(l), cur, spec.walk_step, rng).coords;
    }
    out.push_back(nxt);
    g = nxt;
  }
  return out;
}

/// Bell-shaped tuning over geodesic distance:
///   f(g) = a^2 exp(-d_geo(g, pref)^2 / (2 b^2)) + c
inline double bump_tuning(const Manifold& m, const Element& g, const Element& pref,
                          double a, double b, double c) {
  check(a > 0 && b > 0, "bump_tuning: a and b must be positive");
  double d = geodesic_distance(m, g, pref);
  return a * a * std::exp(-d * d / (2.0 * b * b)) + c;
}

inline SynthDataset gen_dataset(const SynthSpec& spec) {
  validate_synth_spec(spec);
  SynthDataset out;
  out.true_latents = gen_latents(spec);
  auto widths = spec.effective_width_range();

  Rng root(spec.seed);
  out.true_params.reserve(std::size_t(spec.N));
  out.data.Y.resize(spec.N, spec.M);
  for (int i = 0; i < spec.N; ++i) {
    Rng rng = root.stream(0xbead, std::uint64_t(i));
    NeuronTuning t;
    t.a = rng.uniform(spec.amplitude_range[0], spec.amplitude_range[1]);
    t.b = rng.uniform(widths[0], widths[1]);
    t.c = rng.uniform(spec.offset_range[0], spec.offset_range[1]);
    t.sigma = rng.uniform(spec.noise_sigma_range[0], spec.noise_sigma_range[1]);
    t.pref = sample_uniform(spec.manifold, rng);
    for (int j = 0; j < spec.M; ++j) {
      double f = bump_tuning(spec.manifold, out.true_latents[std::size_t(j)], t.pref,
                             t.a, t.b, t.c);
      out.data.Y(i, j) = f + t.sigma * rng.normal();
    }
    out.true_params.push_back(t);
  }
  return out;
}

}  // namespace mgplvm
