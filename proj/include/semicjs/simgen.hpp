#pragma once

// Simulated data with a stochastically time-varying individual covariate:
// two age classes, AR(1)-type covariate paths, covariate-dependent survival.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "semicjs/data.hpp"
#include "semicjs/error.hpp"
#include "semicjs/model.hpp"
#include "semicjs/numeric.hpp"

namespace semicjs {

struct SimConfig {
  int N = 600;
  int T = 10;
  double p = 0.6;
  double lambda = 0.4;
  double mu0 = -1.4;
  double sigma0 = 0.4;
  std::vector<double> mu = {1.0, 1.3};
  std::vector<double> sigma = {0.5, 0.4};
  std::vector<double> eta = {0.5, 0.8};
  int age_boundary = 2;  // class 1: age < 2
  std::string phi1 = "threshold";
  std::string phi2 = "wave";
  unsigned long long seed = 1;

  void validate() const {
    if (N < 1 || T < 2) throw InvalidArgument("SimConfig: need N >= 1 and T >= 2");
    for (double v : {p, lambda}) {
      if (!(v > 0.0 && v < 1.0)) throw InvalidArgument("SimConfig: p and lambda must lie in (0,1)");
    }
    if (mu.size() != 2 || sigma.size() != 2 || eta.size() != 2) {
      throw InvalidArgument("SimConfig: mu, sigma and eta need one value per age class (2)");
    }
    if (!(sigma0 > 0.0) || !(sigma[0] > 0.0) || !(sigma[1] > 0.0)) {
      throw InvalidArgument("SimConfig: sigmas must be > 0");
    }
    for (double e : eta) {
      if (!(e > 0.0 && e < 2.0)) throw InvalidArgument("SimConfig: eta must lie in (0,2)");
    }
    if (age_boundary < 1) throw InvalidArgument("SimConfig: age_boundary must be >= 1");
    for (const auto& f : {phi1, phi2}) {
      if (f != "threshold" && f != "wave" && f != "linear") {
        throw InvalidArgument("SimConfig: unknown survival function '" + f + "'");
      }
    }
  }
};

inline double survival_function(const std::string& name, double w) {
  if (name == "threshold") return link_inv(w < 0.5 ? 2.0 - 0.3 * (w - 0.5) * (w - 0.5) : 2.0);
  if (name == "wave") return link_inv(std::sin(2.5 * (w + 0.8) + 0.45) + 1.3 + 0.7 * w);
  if (name == "linear") return link_inv(1.0 + 0.8 * w);
  throw InvalidArgument("survival_function: unknown name '" + name + "'");
}

/// True survival for class 1 or 2 under the default functions.
inline double true_phi(int cls, double w) {
  if (!std::isfinite(w)) throw InvalidArgument("true_phi: non-finite covariate");
  if (cls == 1) return survival_function("threshold", w);
  if (cls == 2) return survival_function("wave", w);
  throw InvalidArgument("true_phi: class must be 1 or 2");
}

inline double true_phi(const SimConfig& cfg, int cls, double w) {
  return survival_function(cls == 1 ? cfg.phi1 : cfg.phi2, w);
}

struct SimTruth {
  std::vector<std::vector<int>> alive;       // [i][t-1] 1 if alive at t
  std::vector<std::vector<double>> covariate;  // [i][t-1], NaN outside c..death
};

struct SimDataset {
  HistoryData data;
  SimTruth truth;
};

inline SimDataset simulate_dataset(const SimConfig& cfg) {
  cfg.validate();
  const int T = cfg.T;
  SimDataset out;
  out.data.T = T;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (int i = 0; i < cfg.N; ++i) {
    std::seed_seq ss{static_cast<std::uint64_t>(cfg.seed), static_cast<std::uint64_t>(i)};
    std::mt19937_64 rng(ss);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const int c = 1 + static_cast<int>(std::floor(unif(rng) * (T - 1)));
    EncounterHistory h;
    h.id = "ind" + std::to_string(i + 1);
    h.codes.assign(T, 0);
    h.covariates.assign(T, std::nullopt);
    std::vector<int> alive(T, 0);
    std::vector<double> path(T, nan);
    double w = cfg.mu0 + cfg.sigma0 * normal(rng);
    h.codes[c - 1] = 1;
    h.covariates[c - 1] = w;
    alive[c - 1] = 1;
    path[c - 1] = w;
    for (int t = c; t < T; ++t) {
      const int cls = (t - c) < cfg.age_boundary ? 1 : 2;
      const int next_cls = (t + 1 - c) < cfg.age_boundary ? 1 : 2;
      const bool survives = unif(rng) < true_phi(cfg, cls, w);
      const double eps = normal(rng);
      const double u_obs = unif(rng);
      if (!survives) {
        if (u_obs < cfg.lambda) h.codes[t] = 2;
        break;
      }
      w = w + cfg.eta[next_cls - 1] * (cfg.mu[next_cls - 1] - w) + cfg.sigma[next_cls - 1] * eps;
      alive[t] = 1;
      path[t] = w;
      if (u_obs < cfg.p) {
        h.codes[t] = 1;
        h.covariates[t] = w;
      }
    }
    out.data.histories.push_back(std::move(h));
    out.truth.alive.push_back(std::move(alive));
    out.truth.covariate.push_back(std::move(path));
  }
  return out;
}

/// Histories drawn from a fitted or assumed time-varying-covariate model:
/// N individuals first captured uniformly on 1..T-1 at age `age_at_first`.
inline SimDataset simulate_from_model(const ModelSpec& spec, const Eigen::VectorXd& theta, int N,
                                      std::uint64_t seed, int age_at_first = 0) {
  if (spec.regime != Regime::hmm_timevarying) throw InvalidArgument("simulate_from_model: needs the HMM regime");
  if (N < 1 || spec.T < 2) throw InvalidArgument("simulate_from_model: need N >= 1 and T >= 2");
  if (!spec.resolved()) throw InvalidArgument("simulate_from_model: spline domains are unresolved");
  const int T = spec.T;
  const CovProcess cp = covariate_process(spec, theta);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const auto prob = [&](Role r, int age, int t, double w) {
    return block_probability(spec, spec.block_index(r, spec.age_map.class_of(age)), theta, t, w);
  };
  SimDataset out;
  out.data.T = T;
  for (int i = 0; i < N; ++i) {
    std::seed_seq ss{seed, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(0x5eed)};
    std::mt19937_64 rng(ss);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const int c = 1 + static_cast<int>(std::floor(unif(rng) * (T - 1)));
    EncounterHistory h;
    h.id = "ind" + std::to_string(i + 1);
    h.age_at_first = age_at_first;
    h.codes.assign(T, 0);
    h.covariates.assign(T, std::nullopt);
    std::vector<int> alive(T, 0);
    std::vector<double> path(T, nan);
    double w = cp.mu0 + cp.sigma0 * normal(rng);
    h.codes[c - 1] = 1;
    h.covariates[c - 1] = w;
    alive[c - 1] = 1;
    path[c - 1] = w;
    for (int t = c; t < T; ++t) {
      const int age = age_at_first + (t - c);
      const bool survives = unif(rng) < prob(Role::survival, age, t, w);
      if (!survives) {
        if (unif(rng) < prob(Role::recovery, age + 1, t + 1, w)) h.codes[t] = 2;
        break;
      }
      const int k = spec.age_map.class_of(age + 1);
      w = w + cp.eta[k] * (cp.mu[k] - w) + cp.sigma[k] * normal(rng);
      alive[t] = 1;
      path[t] = w;
      if (unif(rng) < prob(Role::recapture, age + 1, t + 1, w)) {
        h.codes[t] = 1;
        h.covariates[t] = w;
      }
    }
    out.data.histories.push_back(std::move(h));
    out.truth.alive.push_back(std::move(alive));
    out.truth.covariate.push_back(std::move(path));
  }
  return out;
}

/// Covariate values at alive occasions spent in the given age class (1 or 2).
inline std::vector<double> class_covariates(const SimDataset& ds, const SimConfig& cfg, int cls) {
  std::vector<double> v;
  for (std::size_t i = 0; i < ds.truth.alive.size(); ++i) {
    const int c = ds.data.histories[i].first_capture();
    for (int t = c; t <= cfg.T; ++t) {
      if (!ds.truth.alive[i][t - 1]) continue;
      const int k = (t - c) < cfg.age_boundary ? 1 : 2;
      if (k == cls) v.push_back(ds.truth.covariate[i][t - 1]);
    }
  }
  return v;
}

/// [q, 1-q] quantile range of the values.
inline std::array<double, 2> trimmed_range(std::vector<double> values, double q = 0.005) {
  if (values.empty()) throw InvalidArgument("trimmed_range: no values");
  std::sort(values.begin(), values.end());
  return {quantile_sorted(values, q), quantile_sorted(values, 1.0 - q)};
}

/// Integrated squared error by the trapezoid rule on `points` points.
inline double integrated_squared_error(const std::function<double(double)>& estimate,
                                       const std::function<double(double)>& truth, std::array<double, 2> range,
                                       int points = 512) {
  const double a = range[0], b = range[1];
  if (!(b > a)) return 0.0;
  const double step = (b - a) / (points - 1);
  double acc = 0.0;
  for (int k = 0; k < points; ++k) {
    const double w = a + k * step;
    const double d = estimate(w) - truth(w);
    acc += (k == 0 || k == points - 1 ? 0.5 : 1.0) * d * d;
  }
  return acc * step;
}

/// Average integrated squared error over replications; ranges[z] is the
/// integration range of replication z.
inline double mise(const std::vector<std::function<double(double)>>& estimates,
                   const std::function<double(double)>& truth, const std::vector<std::array<double, 2>>& ranges) {
  if (estimates.empty()) throw InvalidArgument("mise: no replications");
  if (ranges.size() != estimates.size()) throw InvalidArgument("mise: one range per replication required");
  double acc = 0.0;
  for (std::size_t z = 0; z < estimates.size(); ++z) acc += integrated_squared_error(estimates[z], truth, ranges[z]);
  return acc / static_cast<double>(estimates.size());
}

struct BiasRow {
  std::string name;
  double truth = 0.0;
  double mrb = 0.0;   // percent; absolute bias when truth == 0
  double mstd = 0.0;  // standard deviation of the estimates over replications
  bool absolute = false;
};

/// Mean relative bias (percent) and spread of estimates per parameter.
/// estimates[z][k] is replication z's estimate of parameter k.
inline std::vector<BiasRow> bias_table(const std::vector<std::vector<double>>& estimates,
                                       const std::vector<std::string>& names, const std::vector<double>& truth) {
  if (estimates.size() < 2) throw InvalidArgument("bias_table: need at least 2 replications");
  std::vector<BiasRow> rows;
  const double n = static_cast<double>(estimates.size());
  for (std::size_t k = 0; k < names.size(); ++k) {
    BiasRow r;
    r.name = names[k];
    r.truth = truth[k];
    r.absolute = truth[k] == 0.0;
    double mean = 0.0;
    double rel = 0.0;
    for (const auto& e : estimates) {
      mean += e[k];
      rel += r.absolute ? e[k] - truth[k] : (e[k] - truth[k]) / truth[k];
    }
    mean /= n;
    r.mrb = r.absolute ? rel / n : 100.0 * rel / n;
    double ss = 0.0;
    for (const auto& e : estimates) ss += (e[k] - mean) * (e[k] - mean);
    r.mstd = std::sqrt(ss / (n - 1.0));
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<std::string> sim_parameter_names() {
  return {"lambda", "p", "mu0", "mu1", "mu2", "sigma0", "sigma1", "sigma2", "eta1", "eta2"};
}

inline std::vector<double> sim_parameter_truth(const SimConfig& cfg) {
  return {cfg.lambda, cfg.p, cfg.mu0, cfg.mu[0], cfg.mu[1], cfg.sigma0, cfg.sigma[0], cfg.sigma[1], cfg.eta[0], cfg.eta[1]};
}

/// Semiparametric model matching the simulation: spline survival per age
/// class, constant p and lambda, age-specific covariate process.
inline ModelSpec sim_model_spec(const SimConfig& cfg, int K = 15, int bins = 50) {
  ModelSpec s;
  s.T = cfg.T;
  s.regime = Regime::hmm_timevarying;
  s.age_map.boundaries = {cfg.age_boundary};
  s.hmm_bins = bins;
  auto add = [&](Role r, Form f, std::optional<int> cls) {
    ParamBlock b;
    b.role = r;
    b.form = f;
    b.age_class = cls;
    if (f == Form::spline_in_covariate) b.K = K;
    s.blocks.push_back(b);
  };
  add(Role::survival, Form::spline_in_covariate, 0);
  add(Role::survival, Form::spline_in_covariate, 1);
  add(Role::recapture, Form::constant, std::nullopt);
  add(Role::recovery, Form::constant, std::nullopt);
  add(Role::covproc_mu0, Form::constant, std::nullopt);
  add(Role::covproc_sigma0, Form::constant, std::nullopt);
  for (Role r : {Role::covproc_mu, Role::covproc_sigma, Role::covproc_eta}) {
    add(r, Form::constant, 0);
    add(r, Form::constant, 1);
  }
  s.finalize();
  return s;
}

/// Estimates in sim_parameter_names() order from a fitted sim_model_spec theta.
inline std::vector<double> sim_parameter_estimates(const ModelSpec& spec, const Eigen::VectorXd& theta) {
  const CovProcess cp = covariate_process(spec, theta);
  const double p = block_probability(spec, spec.block_index(Role::recapture, 0), theta, 2, 0.0);
  const double lam = block_probability(spec, spec.block_index(Role::recovery, 0), theta, 2, 0.0);
  return {lam, p, cp.mu0, cp.mu[0], cp.mu[1], cp.sigma0, cp.sigma[0], cp.sigma[1], cp.eta[0], cp.eta[1]};
}

}  // namespace semicjs
