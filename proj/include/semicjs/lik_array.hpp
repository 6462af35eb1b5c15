#pragma once

// Exact CJS likelihoods: multinomial m-/d-array form for shared rates, and the
// per-history form for individual covariates that are known at every occasion.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Core>

#include "semicjs/data.hpp"
#include "semicjs/error.hpp"
#include "semicjs/model.hpp"

namespace semicjs {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// phi[t-1] = survival t -> t+1 (t < T); p[t-1], lambda[t-1] for t >= 2.
struct RateSeries {
  std::vector<double> phi, p, lambda;

  explicit RateSeries(int T = 0) : phi(T, 0.0), p(T, 0.0), lambda(T, 0.0) {}
  int T() const { return static_cast<int>(phi.size()); }
};

namespace detail {

inline void check_rates(const RateSeries& rates, int T) {
  if (rates.T() != T) throw InvalidArgument("rate series length differs from T");
  for (int t = 0; t < T; ++t) {
    for (double v : {rates.phi[t], rates.p[t], rates.lambda[t]}) {
      if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("rates must lie in [0,1]");
    }
  }
}

inline double safe_log(double x) { return x > 0.0 ? std::log(x) : kNegInf; }

}  // namespace detail

/// chi[r-1]: probability of never being observed (alive or dead) after r.
inline std::vector<double> chi(const RateSeries& rates, int T) {
  detail::check_rates(rates, T);
  std::vector<double> out(T, 1.0);
  for (int r = T - 1; r >= 1; --r) {
    const double phi = rates.phi[r - 1];
    const double seen = (1.0 - phi) * rates.lambda[r] +
                        phi * (1.0 - (1.0 - rates.p[r]) * out[r]);
    out[r - 1] = std::clamp(1.0 - seen, 0.0, 1.0);
  }
  return out;
}

struct CellProbs {
  Eigen::MatrixXd q_m;  // (T-1) x T, column s-2 for s = 2..T+1
  Eigen::MatrixXd q_d;  // (T-1) x (T-1), column s-2 for s = 2..T
};

namespace detail {

/// Row r of the cell probabilities, written into q_m_row (length T) and q_d_row (length T-1).
template <typename RowM, typename RowD>
void fill_cell_row(const RateSeries& rates, const std::vector<double>& chi_v, int T, int r,
                   RowM&& q_m_row, RowD&& q_d_row) {
  q_m_row.setZero();
  q_d_row.setZero();
  // log of prod_{t=r}^{s-2} phi_t (1 - p_{t+1})
  double log_missed = 0.0;
  for (int s = r + 1; s <= T; ++s) {
    const double phi = rates.phi[s - 2];
    const double lead = std::exp(log_missed);
    q_m_row[s - 2] = lead * phi * rates.p[s - 1];
    q_d_row[s - 2] = lead * (1.0 - phi) * rates.lambda[s - 1];
    log_missed += safe_log(phi) + safe_log(1.0 - rates.p[s - 1]);
  }
  q_m_row[T - 1] = chi_v[r - 1];
}

}  // namespace detail

inline CellProbs cell_probs(const RateSeries& rates, int T) {
  const std::vector<double> c = chi(rates, T);
  CellProbs out{Eigen::MatrixXd::Zero(T - 1, T), Eigen::MatrixXd::Zero(T - 1, T - 1)};
  for (int r = 1; r < T; ++r) {
    detail::fill_cell_row(rates, c, T, r, out.q_m.row(r - 1), out.q_d.row(r - 1));
  }
  return out;
}

/// Multinomial log-likelihood of release cohort r (constant omitted).
inline double loglik_array_row(const MDArrays& data, int r, const RateSeries& rates) {
  const int T = data.T;
  const std::vector<double> c = chi(rates, T);
  Eigen::RowVectorXd qm(T), qd(T - 1);
  detail::fill_cell_row(rates, c, T, r, qm, qd);
  double ll = 0.0;
  for (int s = r + 1; s <= T + 1; ++s) {
    const double n = data.m(r, s);
    if (n > 0.0) ll += n * detail::safe_log(qm[s - 2]);
  }
  for (int s = r + 1; s <= T; ++s) {
    const double n = data.d(r, s);
    if (n > 0.0) ll += n * detail::safe_log(qd[s - 2]);
  }
  return ll;
}

/// Multinomial log-likelihood with rates shared by every cohort.
inline double loglik_array(const MDArrays& data, const RateSeries& rates) {
  detail::check_rates(rates, data.T);
  double ll = 0.0;
  for (int r = 1; r < data.T; ++r) ll += loglik_array_row(data, r, rates);
  return ll;
}

/// Rates of the cohort released at r (age 0 at release) under a global covariate.
inline RateSeries cohort_rates(const ModelSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& theta,
                               const std::vector<double>& covariate, int r) {
  const int T = spec.T;
  RateSeries rates(T);
  const auto w_at = [&](int t) { return covariate.empty() ? 0.0 : covariate[t - 1]; };
  for (int t = r; t <= T; ++t) {
    const int cls = spec.age_map.class_of(t - r);
    if (t < T) {
      rates.phi[t - 1] =
          block_probability(spec, spec.block_index(Role::survival, cls), theta, t, w_at(t));
    }
    if (t > r) {
      rates.p[t - 1] =
          block_probability(spec, spec.block_index(Role::recapture, cls), theta, t, w_at(t));
      rates.lambda[t - 1] =
          block_probability(spec, spec.block_index(Role::recovery, cls), theta, t, w_at(t));
    }
  }
  return rates;
}

/// Array-regime log-likelihood; `rows` selects release cohorts (empty: all).
inline double loglik_array_model(const ArrayData& data, const ModelSpec& spec,
                                 const Eigen::Ref<const Eigen::VectorXd>& theta,
                                 const std::vector<int>& rows = {}) {
  const int T = data.arrays.T;
  if (T != spec.T) throw InvalidArgument("loglik_array: data T differs from model T");
  bool any_cov = false;
  for (int c = 0; c < spec.n_classes(); ++c) any_cov = any_cov || needs_covariate(spec, c);
  if (any_cov && static_cast<int>(data.covariate.size()) != T) {
    throw InvalidArgument("loglik_array: model needs a global covariate of length T");
  }
  const bool age_free = spec.n_classes() == 1;
  RateSeries shared;
  if (age_free) shared = cohort_rates(spec, theta, data.covariate, 1);
  double ll = 0.0;
  const auto add_row = [&](int r) {
    if (age_free) {
      ll += loglik_array_row(data.arrays, r, shared);
    } else {
      ll += loglik_array_row(data.arrays, r, cohort_rates(spec, theta, data.covariate, r));
    }
  };
  if (rows.empty()) {
    for (int r = 1; r < T; ++r) add_row(r);
  } else {
    for (int r : rows) add_row(r);
  }
  return ll;
}

/// Per-occasion rates of one individual; the covariate at t is the most recent
/// recorded value (a time-constant covariate is simply recorded once).
inline RateSeries individual_rates(const EncounterHistory& hist, const ModelSpec& spec,
                                   const Eigen::Ref<const Eigen::VectorXd>& theta) {
  const int T = spec.T;
  const int c = hist.first_capture();
  RateSeries rates(T);
  std::optional<double> w;
  for (int t = c; t <= T; ++t) {
    if (hist.covariates[t - 1]) w = hist.covariates[t - 1];
    const int cls = spec.age_map.class_of(hist.age_at(t));
    if (!w && needs_covariate(spec, cls)) {
      throw InvalidArgument("loglik_history: history '" + hist.id +
                            "' has no covariate value before occasion " + std::to_string(t));
    }
    const double wv = w.value_or(0.0);
    if (t < T) {
      rates.phi[t - 1] =
          block_probability(spec, spec.block_index(Role::survival, cls), theta, t, wv);
    }
    if (t > c) {
      rates.p[t - 1] = block_probability(spec, spec.block_index(Role::recapture, cls), theta, t, wv);
      rates.lambda[t - 1] =
          block_probability(spec, spec.block_index(Role::recovery, cls), theta, t, wv);
    }
  }
  return rates;
}

/// Log-probability of one history given its own rate sequence, conditional on first capture.
inline double loglik_history(const EncounterHistory& hist, const RateSeries& rates) {
  const int T = rates.T();
  validate(hist, T);
  const int c = hist.first_capture();
  const int l = hist.last_alive();
  double ll = 0.0;
  for (int r = c; r < l; ++r) {
    ll += detail::safe_log(rates.phi[r - 1]);
    const double p = rates.p[r];
    ll += detail::safe_log(hist.codes[r] == 1 ? p : 1.0 - p);
  }
  if (hist.recovered()) {
    ll += detail::safe_log((1.0 - rates.phi[l - 1]) * rates.lambda[l]);
  } else {
    ll += detail::safe_log(chi(rates, T)[l - 1]);
  }
  return ll;
}

inline double loglik_history(const EncounterHistory& hist, const ModelSpec& spec, const PackedParams& packed) {
  return loglik_history(hist, individual_rates(hist, spec, packed.theta));
}

}  // namespace semicjs
