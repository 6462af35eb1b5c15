#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "semicjs/lik_hmm.hpp"

namespace testutil {

using namespace semicjs;

inline double npdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return std::exp(-0.5 * z * z) / (sd * std::sqrt(2.0 * M_PI));
}
inline double ncdf(double z) { return 0.5 * (1.0 + std::erf(z / std::sqrt(2.0))); }

// Enumerates every path through (bins, recently dead, long dead).
inline double brute_force(const EncounterHistory& h, const ModelSpec& spec, const Eigen::VectorXd& th) {
  const CovGrid g = make_grid(spec);
  const int m = g.m;
  const int T = spec.T;
  const int c = h.first_capture();
  const CovProcess cp = covariate_process(spec, th);
  auto mass = [&](double mean, double sd, int k) {
    const double a = k == 0 ? 0.0 : ncdf((g.lo + k * g.width - mean) / sd);
    const double b = k == m - 1 ? 1.0 : ncdf((g.lo + (k + 1) * g.width - mean) / sd);
    return b - a;
  };
  auto prob = [&](Role r, int cls, int t, double w) {
    return block_probability(spec, spec.block_index(r, cls), th, t, w);
  };
  auto emit = [&](int t, int state, int cls) {
    const int code = h.codes[t - 1];
    const double p = prob(Role::recapture, cls, t, 0.0);
    const double lam = prob(Role::recovery, cls, t, 0.0);
    if (state < m) {
      if (code == 0) return 1.0 - p;
      if (code == 2) return 0.0;
      if (h.covariates[t - 1] && g.bin_of(*h.covariates[t - 1]) != state) return 0.0;
      return p;
    }
    if (state == m) return code == 0 ? 1.0 - lam : (code == 2 ? lam : 0.0);
    return code == 0 ? 1.0 : 0.0;
  };
  std::vector<int> path(T + 1, 0);
  double total = 0.0;
  std::function<void(int, double)> rec = [&](int t, double w) {
    if (w == 0.0) return;
    if (t > T) {
      total += w;
      return;
    }
    const int prev = path[t - 1];
    const int a_prev = h.age_at(t - 1);
    const int s_cls = spec.age_map.class_of(a_prev);
    const int p_cls = spec.age_map.class_of(a_prev + 1);
    for (int s = 0; s < m + 2; ++s) {
      double f;
      if (prev < m) {
        const double x = h.covariates[t - 2] ? *h.covariates[t - 2] : g.midpoints[prev];
        const double phi = prob(Role::survival, s_cls, t - 1, x);
        const double mean = x + cp.eta[p_cls] * (cp.mu[p_cls] - x);
        if (s < m) {
          f = phi * (h.covariates[t - 1] ? npdf(*h.covariates[t - 1], mean, cp.sigma[p_cls])
                                         : mass(mean, cp.sigma[p_cls], s));
        } else {
          f = s == m ? 1.0 - phi : 0.0;
        }
      } else {
        f = s == m + 1 ? 1.0 : 0.0;
      }
      path[t] = s;
      rec(t + 1, w * f * emit(t, s, p_cls));
    }
  };
  for (int s = 0; s < m; ++s) {
    double init;
    if (h.covariates[c - 1]) {
      init = g.bin_of(*h.covariates[c - 1]) == s ? npdf(*h.covariates[c - 1], cp.mu0, cp.sigma0) : 0.0;
    } else {
      init = mass(cp.mu0, cp.sigma0, s);
    }
    path[c] = s;
    rec(c + 1, init);
  }
  return std::log(total);
}

}  // namespace testutil
