#pragma once

// Simulation study pipeline: simulate, select h by k-fold CV and by AIC_p,
// fit, and score the survival curves against the truth.

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "semicjs/fit.hpp"
#include "semicjs/parallel.hpp"
#include "semicjs/simgen.hpp"
#include "semicjs/smoothing.hpp"

namespace semicjs {

struct StudyOptions {
  int K = 15;
  int bins = 50;
  int k = 10;
  double calib_frac = 0.9;
  std::vector<double> h_values = default_h_values();
  bool run_cv = true;
  bool run_aic = true;
  int threads = 1;
};

struct ReplicationResult {
  int replication = 0;
  ModelSpec spec;
  std::array<std::array<double, 2>, 2> range{};  // integration range per class
  std::optional<FitResult> cv_fit;
  std::optional<FitResult> aic_fit;
  std::array<double, 2> ise_cv{};   // integrated squared error per class
  std::array<double, 2> ise_aic{};
  std::vector<double> estimates_cv;
};

struct StudySummary {
  std::vector<ReplicationResult> reps;
  std::array<double, 2> mise_cv{};
  std::array<double, 2> mise_aic{};
  std::vector<BiasRow> bias;
};

inline std::array<double, 2> curve_ise(const SimConfig& cfg, const FitResult& fit,
                                       const std::array<std::array<double, 2>, 2>& range) {
  std::array<double, 2> out{};
  for (int j = 0; j < 2; ++j) {
    out[j] = integrated_squared_error(
        [&](double w) { return smooth_curve(fit.spec, fit.packed_hat.theta, j, w); },
        [&](double w) { return true_phi(cfg, j + 1, w); }, range[j]);
  }
  return out;
}

inline ReplicationResult run_replication(const SimConfig& base, int z, const StudyOptions& opt) {
  SimConfig cfg = base;
  cfg.seed = base.seed + static_cast<unsigned long long>(z);
  const SimDataset ds = simulate_dataset(cfg);
  ReplicationResult rr;
  rr.replication = z;
  rr.spec = resolve_spec(sim_model_spec(cfg, opt.K, opt.bins), ds.data);
  for (int j = 0; j < 2; ++j) rr.range[j] = trimmed_range(class_covariates(ds, cfg, j + 1));
  const Objective obj(rr.spec, ds.data);
  const HGrid grid = cartesian_grid({opt.h_values, opt.h_values});
  FitOptions fo;
  fo.restarts = 1;
  fo.seed = cfg.seed;
  const std::vector<FitResult> fits = fit_grid(obj, grid, fo);
  const auto index_of = [&](const Eigen::VectorXd& h) {
    for (std::size_t g = 0; g < grid.size(); ++g) {
      if (grid[g] == h) return static_cast<int>(g);
    }
    return -1;
  };
  if (opt.run_aic) {
    try {
      const SelectionResult sel = aic_select(grid, fits);
      rr.aic_fit = fits[index_of(sel.best_h)];
      rr.ise_aic = curve_ise(cfg, *rr.aic_fit, rr.range);
    } catch (const SelectionUnavailable&) {
    }
  }
  if (opt.run_cv) {
    SelectOptions so;
    so.threads = opt.threads;
    const SelectionResult sel = kfold_cv_histories(rr.spec, ds.data, grid, opt.k, opt.calib_frac, cfg.seed, so);
    rr.cv_fit = fits[index_of(sel.best_h)];
    rr.ise_cv = curve_ise(cfg, *rr.cv_fit, rr.range);
    rr.estimates_cv = sim_parameter_estimates(rr.spec, rr.cv_fit->packed_hat.theta);
  }
  return rr;
}

inline StudySummary run_study(const SimConfig& cfg, int replications, const StudyOptions& opt,
                              const std::function<void(const ReplicationResult&)>& progress = {}) {
  if (replications < 1) throw InvalidArgument("run_study: replications must be >= 1");
  StudySummary s;
  for (int z = 0; z < replications; ++z) {
    s.reps.push_back(run_replication(cfg, z, opt));
    if (progress) progress(s.reps.back());
  }
  int n_cv = 0, n_aic = 0;
  std::vector<std::vector<double>> est;
  for (const auto& r : s.reps) {
    if (r.cv_fit) {
      ++n_cv;
      for (int j = 0; j < 2; ++j) s.mise_cv[j] += r.ise_cv[j];
      est.push_back(r.estimates_cv);
    }
    if (r.aic_fit) {
      ++n_aic;
      for (int j = 0; j < 2; ++j) s.mise_aic[j] += r.ise_aic[j];
    }
  }
  for (int j = 0; j < 2; ++j) {
    s.mise_cv[j] = n_cv ? s.mise_cv[j] / n_cv : std::nan("");
    s.mise_aic[j] = n_aic ? s.mise_aic[j] / n_aic : std::nan("");
  }
  if (est.size() >= 2) s.bias = bias_table(est, sim_parameter_names(), sim_parameter_truth(cfg));
  return s;
}

}  // namespace semicjs
