#pragma once

// Smoothing-parameter selection: leave-one-row-out CV on arrays, k-fold CV on
// histories, staged CV for many smooths, and AIC_p grid search.

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
#include "semicjs/model.hpp"
#include "semicjs/parallel.hpp"

namespace semicjs {

using HGrid = std::vector<Eigen::VectorXd>;

/// Default per-smooth grid {2^-2, 2^0, ..., 2^10}.
inline std::vector<double> default_h_values() {
  std::vector<double> v;
  for (int e = -2; e <= 10; e += 2) v.push_back(std::ldexp(1.0, e));
  return v;
}

/// Cartesian product; the last smooth varies fastest.
inline HGrid cartesian_grid(const std::vector<std::vector<double>>& per_smooth) {
  HGrid out;
  if (per_smooth.empty()) {
    out.emplace_back(0);
    return out;
  }
  std::vector<std::size_t> idx(per_smooth.size(), 0);
  for (const auto& v : per_smooth) {
    if (v.empty()) throw InvalidArgument("cartesian_grid: empty value list");
  }
  while (true) {
    Eigen::VectorXd h(per_smooth.size());
    for (std::size_t j = 0; j < idx.size(); ++j) h[j] = per_smooth[j][idx[j]];
    out.push_back(h);
    int j = static_cast<int>(idx.size()) - 1;
    while (j >= 0 && ++idx[j] == per_smooth[j].size()) idx[j--] = 0;
    if (j < 0) break;
  }
  return out;
}

/// Visiting order in which consecutive grid points are close (boustrophedon
/// over sorted distinct values), used to chain warm starts.
inline std::vector<int> snake_order(const HGrid& grid) {
  std::vector<int> order(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) order[i] = static_cast<int>(i);
  if (grid.empty() || grid[0].size() == 0) return order;
  const Eigen::Index M = grid[0].size();
  // rank of every coordinate among distinct values
  std::vector<std::vector<double>> vals(M);
  for (const auto& h : grid) {
    for (Eigen::Index j = 0; j < M; ++j) vals[j].push_back(h[j]);
  }
  for (auto& v : vals) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
  const auto rank = [&](int i, Eigen::Index j) {
    return static_cast<int>(std::lower_bound(vals[j].begin(), vals[j].end(), grid[i][j]) - vals[j].begin());
  };
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    // compare as a reflected mixed-radix number
    bool flip = false;
    for (Eigen::Index j = 0; j < M; ++j) {
      int ra = rank(a, j), rb = rank(b, j);
      const int n = static_cast<int>(vals[j].size());
      if (flip) {
        ra = n - 1 - ra;
        rb = n - 1 - rb;
      }
      if (ra != rb) return ra < rb;
      flip = (ra % 2) == 1;
    }
    return a < b;
  });
  return order;
}

struct ScoreRow {
  Eigen::VectorXd h;
  int fold = 0;  // 1-based; 0 marks an AIC_p row
  double score = 0.0;
  bool converged = false;
  int stage = 0;   // staged CV pass (1-based), 0 otherwise
  int smooth = 0;  // staged CV smooth being selected (1-based), 0 otherwise
};

struct SelectionResult {
  Eigen::VectorXd best_h;
  HGrid grid;
  std::vector<double> mean_score;  // per grid point; NaN if disqualified
  std::vector<ScoreRow> table;
  std::vector<Eigen::VectorXd> stage_h;  // staged CV: vector after each pass
};

struct SelectOptions {
  FitOptions fit = [] {
    FitOptions f;
    f.restarts = 1;
    f.compute_edf = false;
    return f;
  }();
  int threads = 1;
  double max_missing_frac = 0.2;
};

namespace detail {

inline double h_size(const Eigen::VectorXd& h) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < h.size(); ++j) s += std::log(std::max(h[j], 1e-300));
  return s;
}

/// Index of the best score: higher wins (lower when minimize); ties go to larger h.
inline int argbest(const HGrid& grid, const std::vector<double>& score, bool minimize) {
  int best = -1;
  for (int i = 0; i < static_cast<int>(grid.size()); ++i) {
    if (!std::isfinite(score[i])) continue;
    if (best < 0) {
      best = i;
      continue;
    }
    const double a = minimize ? -score[i] : score[i];
    const double b = minimize ? -score[best] : score[best];
    const double tol = 1e-10 * (1.0 + std::abs(b));
    if (a > b + tol || (std::abs(a - b) <= tol && h_size(grid[i]) > h_size(grid[best]))) best = i;
  }
  return best;
}

inline void check_grid(const HGrid& grid, int n_smooths) {
  if (grid.empty()) throw InvalidArgument("selection: empty smoothing grid");
  for (const auto& h : grid) {
    if (h.size() != n_smooths) {
      throw InvalidArgument("selection: grid vector length " + std::to_string(h.size()) + " differs from " +
                            std::to_string(n_smooths) + " smooths");
    }
    for (Eigen::Index j = 0; j < h.size(); ++j) {
      if (!(h[j] >= 0.0) || !std::isfinite(h[j])) throw InvalidArgument("selection: h must be finite and >= 0");
    }
  }
}

/// Runs fold fits over the whole grid. fold_fn(fold, grid order) fills
/// scores[fold][grid index] (NaN = missing).
inline SelectionResult collect(const HGrid& grid, int folds, const std::vector<std::vector<double>>& scores,
                               const std::vector<std::vector<char>>& conv, double max_missing) {
  SelectionResult res;
  res.grid = grid;
  res.mean_score.assign(grid.size(), std::nan(""));
  for (std::size_t g = 0; g < grid.size(); ++g) {
    double acc = 0.0;
    int ok = 0;
    for (int f = 0; f < folds; ++f) {
      res.table.push_back({grid[g], f + 1, scores[f][g], static_cast<bool>(conv[f][g])});
      if (conv[f][g] && std::isfinite(scores[f][g])) {
        acc += scores[f][g];
        ++ok;
      }
    }
    const int missing = folds - ok;
    if (ok > 0 && missing <= max_missing * folds) res.mean_score[g] = acc / ok;
  }
  const int best = argbest(grid, res.mean_score, false);
  if (best < 0) throw SelectionUnavailable("selection: every candidate lost too many folds");
  res.best_h = grid[best];
  return res;
}

/// Fits the calibration objective along the grid in snake order and scores
/// each fit with `score`.
template <typename Score>
void fold_sweep(const Objective& calib, const HGrid& grid, const std::vector<int>& order, const FitOptions& base,
                Score&& score, std::vector<double>& out, std::vector<char>& conv) {
  out.assign(grid.size(), std::nan(""));
  conv.assign(grid.size(), 0);
  FitOptions fo = base;
  fo.compute_edf = false;
  std::optional<Eigen::VectorXd> prev;
  std::optional<Eigen::MatrixXd> curv = base.init_hessian;
  for (int gi : order) {
    if (prev) fo.start = prev;
    fo.init_hessian = curv;
    FitResult fit;
    try {
      fit = maximize(calib, grid[gi], fo);
    } catch (const FittingFailed&) {
      continue;
    }
    if (!curv) {
      try {
        curv = calib.information(fit.packed_hat.theta, base.free);
      } catch (...) {
      }
    }
    prev = fit.packed_hat.theta;
    conv[gi] = fit.converged;
    out[gi] = score(fit.packed_hat.theta);
  }
}

}  // namespace detail

/// Leave-one-row-out CV over the rows of the m- and d-arrays.
inline SelectionResult loo_cv_array(const ModelSpec& spec_in, const ArrayData& data, const HGrid& grid,
                                    const SelectOptions& opt = {}) {
  if (spec_in.regime != Regime::array_global) throw InvalidArgument("loo_cv_array: model regime is not array_global");
  const ModelSpec spec = resolve_spec(spec_in, data);
  detail::check_grid(grid, spec.n_smooths());
  const int T = spec.T;
  const int folds = T - 1;
  const std::vector<int> order = snake_order(grid);
  std::vector<std::vector<double>> scores(folds);
  std::vector<std::vector<char>> conv(folds);
  parallel_for(folds, opt.threads, [&](int f) {
    const int r = f + 1;
    ArrayData calib = data;
    calib.arrays.m_counts.row(r - 1).setZero();
    calib.arrays.d_counts.row(r - 1).setZero();
    calib.arrays.releases[r - 1] = 0.0;
    const Objective cobj(spec, calib);
    detail::fold_sweep(
        cobj, grid, order, opt.fit,
        [&](const Eigen::VectorXd& th) { return loglik_array_model(data, spec, th, {r}); }, scores[f], conv[f]);
  });
  return detail::collect(grid, folds, scores, conv, opt.max_missing_frac);
}

struct Partition {
  std::vector<int> calib;
  std::vector<int> valid;
};

/// Random calibration/validation split stratified by first-capture occasion.
inline Partition stratified_partition(const HistoryData& data, double calib_frac, std::uint64_t seed, int fold) {
  std::seed_seq ss{seed, static_cast<std::uint64_t>(fold), static_cast<std::uint64_t>(0x5eed)};
  std::mt19937_64 rng(ss);
  Partition p;
  for (auto stratum : strata_by_first_capture(data)) {
    std::shuffle(stratum.begin(), stratum.end(), rng);
    const auto nc = static_cast<std::size_t>(std::lround(calib_frac * static_cast<double>(stratum.size())));
    p.calib.insert(p.calib.end(), stratum.begin(), stratum.begin() + nc);
    p.valid.insert(p.valid.end(), stratum.begin() + nc, stratum.end());
  }
  std::sort(p.calib.begin(), p.calib.end());
  std::sort(p.valid.begin(), p.valid.end());
  return p;
}

/// k random calibration/validation partitions; score = validation
/// log-likelihood per history.
inline SelectionResult kfold_cv_histories(const ModelSpec& spec_in, const HistoryData& data, const HGrid& grid, int k,
                                          double calib_frac, std::uint64_t seed, const SelectOptions& opt = {}) {
  if (spec_in.regime == Regime::array_global) throw InvalidArgument("kfold_cv_histories: history data regime required");
  if (k < 2) throw InvalidArgument("kfold_cv_histories: k must be >= 2");
  if (!(calib_frac > 0.0 && calib_frac < 1.0)) throw InvalidArgument("kfold_cv_histories: calib_frac must lie in (0,1)");
  const ModelSpec spec = resolve_spec(spec_in, data);
  detail::check_grid(grid, spec.n_smooths());
  const std::vector<int> order = snake_order(grid);
  std::vector<std::vector<double>> scores(k);
  std::vector<std::vector<char>> conv(k);
  parallel_for(k, opt.threads, [&](int f) {
    const Partition part = stratified_partition(data, calib_frac, seed, f);
    if (part.valid.empty() || part.calib.empty()) {
      scores[f].assign(grid.size(), std::nan(""));
      conv[f].assign(grid.size(), 0);
      return;
    }
    const Objective cobj(spec, subset(data, part.calib));
    const Objective vobj(spec, subset(data, part.valid));
    const double nv = static_cast<double>(part.valid.size());
    FitOptions fo = opt.fit;
    if (fo.init_hessian) fo.init_hessian = *fo.init_hessian * calib_frac;
    detail::fold_sweep(
        cobj, grid, order, fo, [&](const Eigen::VectorXd& th) { return vobj.loglik(th) / nv; }, scores[f], conv[f]);
  });
  return detail::collect(grid, k, scores, conv, opt.max_missing_frac);
}

/// Fits at every grid point (warm-started along the snake order) with
/// effective degrees of freedom.
inline std::vector<FitResult> fit_grid(const Objective& obj, const HGrid& grid, const FitOptions& base) {
  std::vector<FitResult> fits(grid.size());
  FitOptions fo = base;
  fo.compute_edf = true;
  std::optional<Eigen::VectorXd> prev = base.start;
  std::optional<Eigen::MatrixXd> curv = base.init_hessian;
  for (int gi : snake_order(grid)) {
    fo.start = prev;
    fo.init_hessian = curv;
    fits[gi] = maximize(obj, grid[gi], fo);
    prev = fits[gi].packed_hat.theta;
    if (fits[gi].information) curv = fits[gi].information;
  }
  return fits;
}

/// AIC_p over the grid, given fits from fit_grid.
inline SelectionResult aic_select(const HGrid& grid, const std::vector<FitResult>& fits) {
  SelectionResult res;
  res.grid = grid;
  res.mean_score.assign(grid.size(), std::nan(""));
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const bool ok = fits[g].aic.has_value();
    if (ok) res.mean_score[g] = *fits[g].aic;
    res.table.push_back({grid[g], 0, ok ? *fits[g].aic : std::nan(""), fits[g].converged});
  }
  const int best = detail::argbest(grid, res.mean_score, true);
  if (best < 0) {
    throw SelectionUnavailable(
        "aic: penalized information singular at every grid point; use cross-validation (kfold or staged) instead");
  }
  res.best_h = grid[best];
  return res;
}

inline SelectionResult aic_grid(const ModelSpec& spec_in, const Dataset& data, const HGrid& grid,
                                const FitOptions& fit_opt = {}) {
  const Objective obj(resolve_spec(spec_in, data), data);
  detail::check_grid(grid, obj.spec().n_smooths());
  return aic_select(grid, fit_grid(obj, grid, fit_opt));
}

/// Spec with every spline block replaced by a logistic-linear one.
inline ModelSpec parametric_baseline(ModelSpec spec) {
  for (auto& b : spec.blocks) {
    if (b.form == Form::spline_in_covariate) {
      b.form = Form::logistic_linear_in_covariate;
      b.K = 0;
      b.domain.reset();
    }
  }
  spec.finalize();
  return spec;
}

/// Maps a baseline theta onto the semiparametric spec: spline coefficients at
/// the Greville abscissae reproduce the linear predictor exactly.
inline Eigen::VectorXd project_baseline(const ModelSpec& semi, const ModelSpec& base,
                                        const Eigen::VectorXd& base_theta) {
  Eigen::VectorXd th(semi.dim());
  for (std::size_t bi = 0; bi < semi.blocks.size(); ++bi) {
    const ParamBlock& b = semi.blocks[bi];
    const int so = semi.offsets[bi];
    const int bo = base.offsets[bi];
    if (b.form == Form::spline_in_covariate) {
      const SplineBasis& basis = semi.smooth_bases[b.smooth_index];
      for (int k = 0; k < b.K; ++k) th[so + k] = base_theta[bo] + base_theta[bo + 1] * basis.greville(k);
    } else {
      th.segment(so, semi.dims[bi]) = base_theta.segment(bo, base.dims[bi]);
    }
  }
  return th;
}

/// Sequential per-smooth CV: only smooth j's coefficients are estimated in
/// calibration, everything else held at the current estimates.
inline SelectionResult staged_cv(const ModelSpec& spec_in, const HistoryData& data, const std::vector<double>& h_values,
                                 int stages, std::uint64_t seed, int k = 10, double calib_frac = 0.9,
                                 const SelectOptions& opt = {}) {
  if (stages < 1) throw InvalidArgument("staged_cv: stages must be >= 1");
  if (h_values.empty()) throw InvalidArgument("staged_cv: empty grid");
  const ModelSpec spec = resolve_spec(spec_in, data);
  const int M = spec.n_smooths();
  if (M < 1) throw InvalidArgument("staged_cv: model has no smooth");
  const ModelSpec base = parametric_baseline(spec);
  FitResult base_fit;
  try {
    FitOptions bo = opt.fit;
    bo.compute_edf = false;
    bo.start.reset();
    bo.init_hessian.reset();
    bo.free.clear();
    base_fit = maximize(Objective(base, data), Eigen::VectorXd(0), bo);
  } catch (const std::exception& e) {
    throw SelectionUnavailable(std::string("staged_cv: parametric baseline fit failed: ") + e.what());
  }
  if (!base_fit.converged) throw SelectionUnavailable("staged_cv: parametric baseline fit did not converge");
  const Objective full(spec, data);
  Eigen::VectorXd theta = project_baseline(spec, base, base_fit.packed_hat.theta);
  Eigen::VectorXd h = Eigen::VectorXd::Constant(M, h_values.back());
  SelectionResult out;
  for (int stage = 0; stage < stages; ++stage) {
    for (int j = 0; j < M; ++j) {
      const int bi = spec.smooth_blocks[j];
      HGrid grid;
      for (double v : h_values) {
        Eigen::VectorXd hv = h;
        hv[j] = v;
        grid.push_back(hv);
      }
      SelectOptions so = opt;
      so.fit.start = theta;
      so.fit.free.clear();
      for (int i = 0; i < spec.blocks[bi].K; ++i) so.fit.free.push_back(spec.offsets[bi] + i);
      so.fit.init_hessian.reset();
      const SelectionResult r = kfold_cv_histories(spec, data, grid, k, calib_frac, seed, so);
      h[j] = r.best_h[j];
      for (auto row : r.table) {
        row.stage = stage + 1;
        row.smooth = j + 1;
        out.table.push_back(row);
      }
    }
    FitOptions fo = opt.fit;
    fo.start = theta;
    fo.free.clear();
    fo.init_hessian.reset();
    fo.compute_edf = false;
    const FitResult refit = maximize(full, h, fo);
    theta = refit.packed_hat.theta;
    out.stage_h.push_back(h);
  }
  out.best_h = h;
  out.grid = {h};
  out.mean_score = {std::nan("")};
  return out;
}

}  // namespace semicjs
