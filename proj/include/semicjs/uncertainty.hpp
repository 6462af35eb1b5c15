#pragma once

// Bootstrap refits and confidence bands for fitted smooths.

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "semicjs/data.hpp"
#include "semicjs/error.hpp"
#include "semicjs/fit.hpp"
#include "semicjs/lik_array.hpp"
#include "semicjs/model.hpp"
#include "semicjs/numeric.hpp"
#include "semicjs/parallel.hpp"

namespace semicjs {

inline std::mt19937_64 replicate_rng(std::uint64_t seed, int replicate) {
  std::seed_seq ss{seed, static_cast<std::uint64_t>(replicate), static_cast<std::uint64_t>(0xb007)};
  return std::mt19937_64(ss);
}

/// Resample histories with replacement within first-capture strata.
inline HistoryData resample_histories(const HistoryData& data, std::uint64_t seed, int replicate) {
  std::mt19937_64 rng = replicate_rng(seed, replicate);
  std::vector<int> idx;
  for (const auto& stratum : strata_by_first_capture(data)) {
    if (stratum.empty()) continue;
    std::uniform_int_distribution<std::size_t> pick(0, stratum.size() - 1);
    for (std::size_t k = 0; k < stratum.size(); ++k) idx.push_back(stratum[pick(rng)]);
  }
  return subset(data, idx);
}

/// New m/d-arrays: per cohort a multinomial draw of the release count over
/// the fitted cell probabilities.
inline ArrayData simulate_arrays(const ArrayData& data, const ModelSpec& spec, const Eigen::VectorXd& theta,
                                 std::uint64_t seed, int replicate) {
  std::mt19937_64 rng = replicate_rng(seed, replicate);
  const int T = spec.T;
  ArrayData out = data;
  out.arrays = MDArrays::zeros(T);
  for (int r = 1; r < T; ++r) {
    const RateSeries rates = cohort_rates(spec, theta, data.covariate, r);
    const CellProbs cp = cell_probs(rates, T);
    auto n = static_cast<long long>(std::llround(data.arrays.releases[r - 1]));
    out.arrays.releases[r - 1] = static_cast<double>(n);
    // cells: m(r, r+1..T+1) then d(r, r+1..T)
    std::vector<double> probs;
    std::vector<std::pair<bool, int>> cells;
    for (int s = r + 1; s <= T + 1; ++s) {
      probs.push_back(cp.q_m(r - 1, s - 2));
      cells.emplace_back(true, s);
    }
    for (int s = r + 1; s <= T; ++s) {
      probs.push_back(cp.q_d(r - 1, s - 2));
      cells.emplace_back(false, s);
    }
    double rest = 1.0;
    for (std::size_t c = 0; c < probs.size() && n > 0; ++c) {
      long long draw;
      if (c + 1 == probs.size() || rest <= probs[c]) {
        draw = n;
      } else {
        const double q = std::clamp(probs[c] / rest, 0.0, 1.0);
        draw = std::binomial_distribution<long long>(n, q)(rng);
      }
      if (cells[c].first) {
        out.arrays.m(r, cells[c].second) += static_cast<double>(draw);
      } else {
        out.arrays.d(r, cells[c].second) += static_cast<double>(draw);
      }
      n -= draw;
      rest -= probs[c];
    }
  }
  return out;
}

struct BootstrapResult {
  std::vector<FitResult> fits;  // successful replicates, in replicate order
  std::vector<int> replicate;   // replicate index of each fit
  std::vector<int> failed;
};

struct BootstrapOptions {
  int threads = 1;
  double max_fail_frac = 0.1;
  FitOptions fit = [] {
    FitOptions f;
    f.restarts = 1;
    f.compute_edf = false;
    return f;
  }();
};

namespace detail {

template <typename MakeData>
BootstrapResult run_bootstrap(const FitResult& fit, int B, const BootstrapOptions& opt, MakeData&& make_data) {
  if (B < 1) throw InvalidArgument("bootstrap: B must be >= 1");
  std::vector<std::optional<FitResult>> res(B);
  parallel_for(B, opt.threads, [&](int b) {
    const Dataset d = make_data(b);
    const Objective obj(fit.spec, d);
    FitOptions fo = opt.fit;
    fo.start = fit.packed_hat.theta;
    if (fit.information && !fo.init_hessian) fo.init_hessian = fit.information;
    try {
      FitResult r = maximize(obj, fit.h_vec, fo);
      if (!r.converged) {
        FitOptions cold = opt.fit;
        cold.start.reset();
        cold.init_hessian.reset();
        r = maximize(obj, fit.h_vec, cold);
      }
      if (r.converged) res[b] = std::move(r);
    } catch (const FittingFailed&) {
    }
  });
  BootstrapResult out;
  for (int b = 0; b < B; ++b) {
    if (res[b]) {
      out.fits.push_back(std::move(*res[b]));
      out.replicate.push_back(b);
    } else {
      out.failed.push_back(b);
    }
  }
  if (static_cast<double>(out.failed.size()) > opt.max_fail_frac * B) {
    throw BootstrapFailed("bootstrap: " + std::to_string(out.failed.size()) + " of " + std::to_string(B) +
                          " replicate fits failed");
  }
  return out;
}

}  // namespace detail

inline BootstrapResult nonparam_bootstrap(const HistoryData& data, const FitResult& fit, int B, std::uint64_t seed,
                                          const BootstrapOptions& opt = {}) {
  if (fit.spec.regime == Regime::array_global) throw InvalidArgument("nonparam_bootstrap: needs history data");
  return detail::run_bootstrap(fit, B, opt, [&](int b) { return Dataset(resample_histories(data, seed, b)); });
}

inline BootstrapResult param_bootstrap(const ArrayData& data, const FitResult& fit, int B, std::uint64_t seed,
                                       const BootstrapOptions& opt = {}) {
  if (fit.spec.regime != Regime::array_global) throw InvalidArgument("param_bootstrap: needs m/d-array data");
  return detail::run_bootstrap(fit, B, opt, [&](int b) {
    return Dataset(simulate_arrays(data, fit.spec, fit.packed_hat.theta, seed, b));
  });
}

struct Band {
  Eigen::VectorXd w;
  Eigen::VectorXd estimate;
  Eigen::VectorXd lo, hi;
  double factor = 1.0;          // simultaneous widening factor
  double coverage = 0.0;        // fraction of replicate curves fully inside
};

/// Replicate curves of smooth j on the probability scale; rows = replicates.
inline Eigen::MatrixXd replicate_curves(const std::vector<FitResult>& fits, int j, const Eigen::VectorXd& w) {
  Eigen::MatrixXd C(static_cast<Eigen::Index>(fits.size()), w.size());
  for (std::size_t b = 0; b < fits.size(); ++b) {
    for (Eigen::Index k = 0; k < w.size(); ++k) {
      C(static_cast<Eigen::Index>(b), k) = smooth_curve(fits[b].spec, fits[b].packed_hat.theta, j, w[k]);
    }
  }
  return C;
}

inline Band pointwise_band(const Eigen::MatrixXd& curves, const Eigen::VectorXd& estimate, const Eigen::VectorXd& w,
                           double level) {
  if (!(level > 0.0 && level < 1.0)) throw InvalidArgument("pointwise_band: level must lie in (0,1)");
  if (curves.rows() < 20) {
    throw BootstrapFailed("pointwise_band: need at least 20 replicates, have " + std::to_string(curves.rows()));
  }
  Band b;
  b.w = w;
  b.estimate = estimate;
  b.lo.resize(w.size());
  b.hi.resize(w.size());
  const double a = 0.5 * (1.0 - level);
  std::vector<double> col(curves.rows());
  for (Eigen::Index k = 0; k < w.size(); ++k) {
    for (Eigen::Index r = 0; r < curves.rows(); ++r) col[r] = curves(r, k);
    std::sort(col.begin(), col.end());
    b.lo[k] = quantile_sorted(col, a);
    b.hi[k] = quantile_sorted(col, 1.0 - a);
  }
  return b;
}

inline Band pointwise_band(const std::vector<FitResult>& boot, const FitResult& fit, int j, const Eigen::VectorXd& w,
                           double level) {
  Eigen::VectorXd est(w.size());
  for (Eigen::Index k = 0; k < w.size(); ++k) est[k] = smooth_curve(fit.spec, fit.packed_hat.theta, j, w[k]);
  return pointwise_band(replicate_curves(boot, j, w), est, w, level);
}

namespace detail {

inline double clamped_logit(double p) { return logit(std::clamp(p, 1e-12, 1.0 - 1e-12)); }

struct Widening {
  Eigen::VectorXd center, down, up;  // logit scale
};

inline Widening widening(const Band& pw) {
  Widening wd;
  const Eigen::Index n = pw.w.size();
  wd.center.resize(n);
  wd.down.resize(n);
  wd.up.resize(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const double c = clamped_logit(std::clamp(pw.estimate[k], pw.lo[k], pw.hi[k]));
    wd.center[k] = c;
    wd.down[k] = c - clamped_logit(pw.lo[k]);
    wd.up[k] = clamped_logit(pw.hi[k]) - c;
  }
  return wd;
}

inline double coverage(const Eigen::MatrixXd& L, const Widening& wd, double c) {
  int inside = 0;
  for (Eigen::Index r = 0; r < L.rows(); ++r) {
    bool ok = true;
    for (Eigen::Index k = 0; k < L.cols() && ok; ++k) {
      const double x = L(r, k);
      ok = x >= wd.center[k] - c * wd.down[k] && x <= wd.center[k] + c * wd.up[k];
    }
    inside += ok;
  }
  return static_cast<double>(inside) / static_cast<double>(L.rows());
}

}  // namespace detail

/// Fraction of replicate curves lying entirely inside the band.
inline double band_coverage(const Eigen::MatrixXd& curves, const Band& band) {
  int inside = 0;
  for (Eigen::Index r = 0; r < curves.rows(); ++r) {
    bool ok = true;
    for (Eigen::Index k = 0; k < curves.cols() && ok; ++k) {
      ok = curves(r, k) >= band.lo[k] && curves(r, k) <= band.hi[k];
    }
    inside += ok;
  }
  return static_cast<double>(inside) / static_cast<double>(curves.rows());
}

/// Pointwise band widened on the logit scale about the estimate by the
/// smallest factor c in [1, 20] (bisection) containing `level` of the curves.
inline Band simultaneous_band(const Eigen::MatrixXd& curves, const Band& pointwise, double level) {
  if (!(level > 0.0 && level < 1.0)) throw InvalidArgument("simultaneous_band: level must lie in (0,1)");
  Eigen::MatrixXd L(curves.rows(), curves.cols());
  for (Eigen::Index r = 0; r < curves.rows(); ++r) {
    for (Eigen::Index k = 0; k < curves.cols(); ++k) L(r, k) = detail::clamped_logit(curves(r, k));
  }
  const detail::Widening wd = detail::widening(pointwise);
  double lo = 1.0, hi = 20.0;
  double cov_lo = detail::coverage(L, wd, lo);
  double c = lo;
  if (cov_lo < level) {
    const double cov_hi = detail::coverage(L, wd, hi);
    if (cov_hi < level) {
      throw BootstrapFailed("simultaneous_band: coverage at factor 20 is only " + std::to_string(cov_hi));
    }
    double cov_top = cov_hi;
    while (hi - lo > 1e-3) {
      const double mid = 0.5 * (lo + hi);
      const double cm = detail::coverage(L, wd, mid);
      if (cm < cov_lo || cm > cov_top) throw std::logic_error("simultaneous_band: coverage not monotone in factor");
      if (cm >= level) {
        hi = mid;
        cov_top = cm;
      } else {
        lo = mid;
        cov_lo = cm;
      }
    }
    c = hi;
  }
  Band b = pointwise;
  b.factor = c;
  for (Eigen::Index k = 0; k < b.w.size(); ++k) {
    b.lo[k] = std::min(pointwise.lo[k], link_inv(wd.center[k] - c * wd.down[k]));
    b.hi[k] = std::max(pointwise.hi[k], link_inv(wd.center[k] + c * wd.up[k]));
  }
  b.coverage = band_coverage(curves, b);
  return b;
}

}  // namespace semicjs
