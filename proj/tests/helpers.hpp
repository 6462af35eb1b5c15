#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "semicjs/data.hpp"
#include "semicjs/model.hpp"
#include "semicjs/uncertainty.hpp"

namespace testutil {

using semicjs::Form;
using semicjs::ParamBlock;
using semicjs::Role;

inline ParamBlock blk(Role r, Form f, std::optional<int> cls = std::nullopt) {
  ParamBlock b;
  b.role = r;
  b.form = f;
  b.age_class = cls;
  return b;
}

inline ParamBlock spline_blk(Role r, int K, double lo, double hi, std::optional<int> cls = std::nullopt) {
  ParamBlock b = blk(r, Form::spline_in_covariate, cls);
  b.K = K;
  b.domain = std::array<double, 2>{lo, hi};
  return b;
}

// Two age classes (boundary 1), spline survival for adults, constant juveniles.
inline semicjs::ModelSpec hmm_spec(int T, int bins, double lo, double hi, int K = 6) {
  semicjs::ModelSpec s;
  s.T = T;
  s.regime = semicjs::Regime::hmm_timevarying;
  s.age_map.boundaries = {1};
  s.hmm_bins = bins;
  s.hmm_grid = std::array<double, 2>{lo, hi};
  s.blocks = {blk(Role::survival, Form::logistic_linear_in_covariate, 0),
              spline_blk(Role::survival, K, lo, hi, 1),
              blk(Role::recapture, Form::per_occasion),
              blk(Role::recovery, Form::logistic_linear_in_time),
              blk(Role::covproc_mu0, Form::constant),
              blk(Role::covproc_sigma0, Form::constant),
              blk(Role::covproc_mu, Form::constant, 0),
              blk(Role::covproc_mu, Form::constant, 1),
              blk(Role::covproc_sigma, Form::constant),
              blk(Role::covproc_eta, Form::constant, 0),
              blk(Role::covproc_eta, Form::constant, 1)};
  s.finalize();
  return s;
}

inline Eigen::VectorXd random_theta(int dim, unsigned seed, double scale = 0.6) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  Eigen::VectorXd th(dim);
  for (int i = 0; i < dim; ++i) th[i] = u(rng);
  return th;
}

inline semicjs::EncounterHistory history(std::vector<int> codes, std::vector<std::optional<double>> cov,
                                         int age0 = 0) {
  semicjs::EncounterHistory h;
  h.codes = std::move(codes);
  h.covariates = std::move(cov);
  h.age_at_first = age0;
  return h;
}

// Ring-recovery shape: three age classes, survival smooth in a global
// covariate per class, no live resightings, recovery trend in time.
inline semicjs::ModelSpec heron_spec(int T, int K = 7, double lo = 0.0, double hi = 57.0) {
  semicjs::ModelSpec s;
  s.T = T;
  s.regime = semicjs::Regime::array_global;
  s.age_map.boundaries = {1, 2};
  for (int c = 0; c < 3; ++c) s.blocks.push_back(spline_blk(Role::survival, K, lo, hi, c));
  ParamBlock p = blk(Role::recapture, Form::fixed);
  p.fixed_value = 0.0;
  s.blocks.push_back(p);
  s.blocks.push_back(blk(Role::recovery, Form::logistic_linear_in_time));
  s.finalize();
  return s;
}

inline double heron_eta(int cls, double w) {
  const double x = w / 57.0;
  switch (cls) {
    case 0: return -0.2 - 1.2 * x;
    case 1: return 0.6 - 0.8 * x * x;
    default: return 1.4 - 1.5 * x + 0.6 * std::sin(3.0 * x);
  }
}

inline Eigen::VectorXd heron_theta(const semicjs::ModelSpec& s) {
  Eigen::VectorXd th = Eigen::VectorXd::Zero(s.dim());
  for (int j = 0; j < s.n_smooths(); ++j) {
    const int bi = s.smooth_blocks[j];
    for (int k = 0; k < s.blocks[bi].K; ++k) th[s.offsets[bi] + k] = heron_eta(j, s.smooth_bases[j].greville(k));
  }
  const int rb = s.block_index(Role::recovery, 0);
  th[s.offsets[rb]] = semicjs::logit(0.08);
  th[s.offsets[rb] + 1] = -0.3;
  return th;
}

inline std::vector<double> heron_covariate(int T, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> g(2.0, 8.0);
  std::vector<double> w(T);
  for (auto& v : w) v = std::min(57.0, g(rng));
  w[0] = 0.0;
  w[T - 1] = 57.0;
  return w;
}

inline semicjs::ArrayData heron_data(int T, double releases, unsigned seed) {
  const semicjs::ModelSpec s = heron_spec(T);
  semicjs::ArrayData d;
  d.covariate = heron_covariate(T, seed);
  d.arrays = semicjs::MDArrays::zeros(T);
  d.arrays.releases.setConstant(releases);
  return semicjs::simulate_arrays(d, s, heron_theta(s), seed, 0);
}

// One spline survival smooth in a global covariate, constant p and lambda.
inline semicjs::ModelSpec single_smooth_spec(int T, int K, Form form = Form::spline_in_covariate) {
  semicjs::ModelSpec s;
  s.T = T;
  s.blocks = {form == Form::spline_in_covariate ? spline_blk(Role::survival, K, -2.0, 2.0) : blk(Role::survival, form),
              blk(Role::recapture, Form::constant), blk(Role::recovery, Form::constant)};
  s.finalize();
  return s;
}

inline semicjs::ArrayData single_smooth_data(int T, unsigned seed) {
  semicjs::ArrayData d;
  d.arrays = semicjs::MDArrays::zeros(T);
  d.arrays.releases.setConstant(400.0);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  d.covariate.resize(T);
  for (auto& w : d.covariate) w = u(rng);
  Eigen::Vector4d th(0.8, 0.5, semicjs::logit(0.5), semicjs::logit(0.2));
  // curvature so the spline and the line differ
  const semicjs::ModelSpec wave = single_smooth_spec(T, 12);
  Eigen::VectorXd tw(wave.dim());
  for (int k = 0; k < 12; ++k) {
    const double x = wave.smooth_bases[0].greville(k);
    tw[k] = th[0] + th[1] * x + 0.5 * std::sin(2.0 * x);
  }
  tw[12] = th[2];
  tw[13] = th[3];
  return semicjs::simulate_arrays(d, wave, tw, seed, 0);
}

}  // namespace testutil
