// Acceptance checks: one PASS/FAIL line per criterion.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "hmm_oracle.hpp"
#include "semicjs/fit.hpp"
#include "semicjs/lik_array.hpp"
#include "semicjs/lik_hmm.hpp"
#include "semicjs/simgen.hpp"
#include "semicjs/smoothing.hpp"
#include "semicjs/study.hpp"
#include "semicjs/uncertainty.hpp"

using namespace semicjs;
using testutil::blk;
using testutil::spline_blk;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", x);
  return buf;
}

// Criteria 1-3 share one study run.
const StudySummary& study() {
  static const StudySummary s = [] {
    SimConfig cfg;
    cfg.seed = 20240611;
    StudyOptions opt;
    opt.K = 15;
    opt.bins = 50;
    opt.k = 10;
    return run_study(cfg, 20, opt, [](const ReplicationResult& r) {
      std::cerr << "  replication " << r.replication + 1 << "/20: ise_cv " << fmt(r.ise_cv[0]) << " "
                << fmt(r.ise_cv[1]) << ", ise_aic " << fmt(r.ise_aic[0]) << " " << fmt(r.ise_aic[1]) << "\n";
    });
  }();
  return s;
}

Outcome criterion1() {
  const StudySummary& s = study();
  const bool ok1 = s.mise_cv[0] >= 0.005 && s.mise_cv[0] <= 0.035;
  const bool ok2 = s.mise_cv[1] >= 0.012 && s.mise_cv[1] <= 0.060;
  return {ok1 && ok2, "MISE class 1 " + fmt(s.mise_cv[0]) + " in [0.005, 0.035]" + (ok1 ? "" : " (no)") +
                          ", class 2 " + fmt(s.mise_cv[1]) + " in [0.012, 0.060]" + (ok2 ? "" : " (no)")};
}

Outcome criterion2() {
  const StudySummary& s = study();
  bool ok = true;
  std::string d;
  for (int j = 0; j < 2; ++j) {
    const double rel = std::abs(s.mise_aic[j] - s.mise_cv[j]) / s.mise_cv[j];
    ok = ok && rel <= 0.25;
    d += "class " + std::to_string(j + 1) + " AIC " + fmt(s.mise_aic[j]) + " vs CV " + fmt(s.mise_cv[j]) +
         " (rel " + fmt(rel) + ")" + (j == 0 ? ", " : "");
  }
  return {ok, d};
}

Outcome criterion3() {
  const StudySummary& s = study();
  const std::vector<double> reference_mstd = {0.03, 0.02, 0.02, 0.16, 0.14, 0.01, 0.02, 0.02, 0.04, 0.03};
  if (s.bias.size() != reference_mstd.size()) return {false, "bias table unavailable"};
  bool ok = true;
  std::string d;
  for (std::size_t k = 0; k < s.bias.size(); ++k) {
    const BiasRow& r = s.bias[k];
    const double ratio = r.mstd / reference_mstd[k];
    const bool good = std::abs(r.mrb) < 5.0 && ratio <= 3.0 && ratio >= 1.0 / 3.0;
    ok = ok && good;
    d += r.name + " mrb " + fmt(r.mrb) + "% mstd " + fmt(r.mstd) + (good ? "" : " (no)") +
         (k + 1 < s.bias.size() ? "; " : "");
  }
  return {ok, d};
}

Outcome criterion4() {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int inst = 0; inst < 200; ++inst) {
    const int T = 3 + static_cast<int>(u(rng) * 3);
    const int m = 2 + static_cast<int>(u(rng) * 3);
    const ModelSpec spec = testutil::hmm_spec(T, m, -2.5, 2.5, 5);
    const Eigen::VectorXd th = testutil::random_theta(spec.dim(), 1000 + inst, 0.8);
    const int c = std::max(1, T - 3) + static_cast<int>(u(rng) * (T - std::max(1, T - 3)));
    EncounterHistory h;
    h.age_at_first = static_cast<int>(u(rng) * 3);
    h.codes.assign(T, 0);
    h.covariates.assign(T, std::nullopt);
    h.codes[c - 1] = 1;
    if (u(rng) < 0.7) h.covariates[c - 1] = -2.4 + 4.8 * u(rng);
    for (int t = c + 1; t <= T; ++t) {
      const double x = u(rng);
      if (x < 0.2) {
        h.codes[t - 1] = 2;
        break;
      }
      if (x < 0.6) {
        h.codes[t - 1] = 1;
        if (u(rng) < 0.7) h.covariates[t - 1] = -2.4 + 4.8 * u(rng);
      }
    }
    const double oracle = testutil::brute_force(h, spec, th);
    const double ref = loglik_hmm(h, make_grid(spec), spec, make_packed(spec, th));
    const HmmLikelihood lik(spec, HistoryData{T, {h}});
    const double fast = lik.evaluate(th);
    worst = std::max({worst, std::abs(ref - oracle) / std::abs(oracle), std::abs(fast - oracle) / std::abs(oracle)});
  }
  return {worst < 1e-10, "200 instances, worst relative error " + fmt(worst)};
}

Outcome criterion5() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_row = 0.0;
  for (int draw = 0; draw < 1000; ++draw) {
    const int T = 3 + draw % 10;
    RateSeries r(T);
    for (int t = 0; t < T; ++t) {
      r.phi[t] = u(rng);
      r.p[t] = u(rng);
      r.lambda[t] = u(rng);
    }
    const CellProbs q = cell_probs(r, T);
    for (int row = 0; row < T - 1; ++row) {
      worst_row = std::max(worst_row, std::abs(q.q_m.row(row).sum() + q.q_d.row(row).sum() - 1.0));
    }
  }
  double worst_agg = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    const int T = 3 + rep;
    RateSeries r(T);
    for (int t = 0; t < T; ++t) {
      r.phi[t] = 0.05 + 0.9 * u(rng);
      r.p[t] = 0.05 + 0.9 * u(rng);
      r.lambda[t] = 0.05 + 0.9 * u(rng);
    }
    std::vector<EncounterHistory> hs;
    for (int i = 0; i < 400; ++i) {
      const int c = 1 + static_cast<int>(u(rng) * (T - 1));
      EncounterHistory h;
      h.codes.assign(T, 0);
      h.covariates.assign(T, std::nullopt);
      h.codes[c - 1] = 1;
      for (int t = c; t < T; ++t) {
        if (u(rng) >= r.phi[t - 1]) {
          if (u(rng) < r.lambda[t]) h.codes[t] = 2;
          break;
        }
        if (u(rng) < r.p[t]) h.codes[t] = 1;
      }
      hs.push_back(std::move(h));
    }
    double sum = 0.0;
    for (const auto& h : hs) sum += loglik_history(h, r);
    worst_agg = std::max(worst_agg, std::abs(sum - loglik_array(build_arrays(hs, T), r)) / std::abs(sum));
  }
  return {worst_row < 1e-12 && worst_agg < 1e-10,
          "worst row-sum error " + fmt(worst_row) + ", worst aggregation relative error " + fmt(worst_agg)};
}

Outcome criterion6() {
  const int T = 10;
  const ModelSpec semi = testutil::single_smooth_spec(T, 12);
  const ModelSpec lin = testutil::single_smooth_spec(T, 0, Form::logistic_linear_in_covariate);
  const ArrayData d = testutil::single_smooth_data(T, 11);
  const FitResult a = maximize(semi, d, Eigen::VectorXd::Constant(1, std::ldexp(1.0, 30)));
  const FitResult b = maximize(lin, d, Eigen::VectorXd(0));
  if (!a.converged || !b.converged || !a.edf) return {false, "fit did not converge"};
  const auto [lo, hi] = std::minmax_element(d.covariate.begin(), d.covariate.end());
  double worst = 0.0;
  for (int k = 0; k <= 200; ++k) {
    const double w = *lo + (*hi - *lo) * k / 200.0;
    const double ea = predictor(a.spec.smooth_bases[0], a.packed_hat.theta.head(12), w);
    const double eb = b.packed_hat.theta[0] + b.packed_hat.theta[1] * w;
    worst = std::max(worst, std::abs(ea - eb));
  }
  const double smooth_edf = *a.edf - 2.0;  // constant p and lambda
  return {worst < 1e-2 && std::abs(smooth_edf - 2.0) <= 0.05,
          "max link-scale difference " + fmt(worst) + ", smooth edf " + fmt(smooth_edf)};
}

// Truth-interpolated parameters for the simulation model.
Eigen::VectorXd sim_truth_theta(const ModelSpec& s, const SimConfig& cfg) {
  Eigen::VectorXd th = Eigen::VectorXd::Zero(s.dim());
  for (int j = 0; j < 2; ++j) {
    const int bi = s.smooth_blocks[j];
    for (int k = 0; k < s.blocks[bi].K; ++k) {
      th[s.offsets[bi] + k] = logit(true_phi(cfg, j + 1, s.smooth_bases[j].greville(k)));
    }
  }
  const auto set = [&](Role r, int cls, double natural) {
    const int bi = s.block_index(r, cls);
    th[s.offsets[bi]] = detail::to_theta(r, Form::constant, natural, "truth");
  };
  set(Role::recapture, 0, cfg.p);
  set(Role::recovery, 0, cfg.lambda);
  set(Role::covproc_mu0, 0, cfg.mu0);
  set(Role::covproc_sigma0, 0, cfg.sigma0);
  for (int c = 0; c < 2; ++c) {
    set(Role::covproc_mu, c, cfg.mu[c]);
    set(Role::covproc_sigma, c, cfg.sigma[c]);
    set(Role::covproc_eta, c, cfg.eta[c]);
  }
  return th;
}

Outcome criterion7() {
  SimConfig cfg;
  cfg.seed = 7;
  const SimDataset ds = simulate_dataset(cfg);
  const ModelSpec s25 = resolve_spec(sim_model_spec(cfg, 15, 25), ds.data);
  const ModelSpec s100 = resolve_spec(sim_model_spec(cfg, 15, 100), ds.data);
  const Eigen::VectorXd th = sim_truth_theta(s25, cfg);
  const double l25 = HmmLikelihood(s25, ds.data).evaluate(th);
  const double l100 = HmmLikelihood(s100, ds.data).evaluate(th);
  const double rel = std::abs(l25 - l100) / std::abs(l100);
  return {rel < 1e-3, "loglik m=25 " + fmt(l25) + ", m=100 " + fmt(l100) + ", relative difference " + fmt(rel)};
}

Outcome criterion8() {
  const int T = 20;
  const ModelSpec s = testutil::heron_spec(T);
  const ArrayData d = testutil::heron_data(T, 1000, 8);
  const FitResult f = maximize(s, d, Eigen::Vector3d(4.0, 4.0, 4.0));
  if (!f.converged) return {false, "fit did not converge"};
  const BootstrapResult boot = param_bootstrap(d, f, 200, 8);
  Eigen::VectorXd w(100);
  for (int k = 0; k < 100; ++k) w[k] = 57.0 * k / 99.0;
  bool ok = true;
  std::string det = std::to_string(boot.fits.size()) + " replicates;";
  for (int j = 0; j < s.n_smooths(); ++j) {
    const Eigen::MatrixXd curves = replicate_curves(boot.fits, j, w);
    const Band pw = pointwise_band(boot.fits, f, j, w, 0.95);
    const Band sim = simultaneous_band(curves, pw, 0.95);
    const double cov = band_coverage(curves, sim);
    ok = ok && boot.fits.size() == 200 && cov >= 0.95 && cov <= 0.97;
    det += " smooth " + std::to_string(j + 1) + " coverage " + fmt(cov);
  }
  return {ok, det};
}

// Sheep-shaped model: four age classes, survival smooth per class, per-occasion
// recapture and recovery, age-specific covariate process.
ModelSpec soay_spec(int T, int bins, std::optional<std::array<double, 2>> domain) {
  ModelSpec s;
  s.T = T;
  s.regime = Regime::hmm_timevarying;
  s.age_map.boundaries = {1, 2, 7};
  s.hmm_bins = bins;
  for (int c = 0; c < 4; ++c) {
    ParamBlock b = blk(Role::survival, Form::spline_in_covariate, c);
    b.K = 15;
    b.domain = domain;
    s.blocks.push_back(b);
  }
  s.blocks.push_back(blk(Role::recapture, Form::per_occasion));
  s.blocks.push_back(blk(Role::recovery, Form::per_occasion));
  s.blocks.push_back(blk(Role::covproc_mu0, Form::constant));
  s.blocks.push_back(blk(Role::covproc_sigma0, Form::constant));
  for (Role r : {Role::covproc_mu, Role::covproc_sigma, Role::covproc_eta}) {
    for (int c = 0; c < 4; ++c) s.blocks.push_back(blk(r, Form::constant, c));
  }
  if (domain) s.hmm_grid = domain;
  s.finalize();
  return s;
}

double soay_eta(int cls, double w) {
  switch (cls) {
    case 0: return -0.3 + 1.4 * w;
    case 1: return 1.2 + 0.6 * w;
    case 2: return 2.0 + 0.5 * std::sin(2.0 * w);
    default: return 1.0 + 0.8 * w - 0.4 * w * w;
  }
}

Eigen::VectorXd soay_theta(const ModelSpec& s) {
  Eigen::VectorXd th = Eigen::VectorXd::Zero(s.dim());
  for (int j = 0; j < 4; ++j) {
    const int bi = s.smooth_blocks[j];
    for (int k = 0; k < 15; ++k) th[s.offsets[bi] + k] = soay_eta(j, s.smooth_bases[j].greville(k));
  }
  for (int t = 2; t <= s.T; ++t) {
    th[s.offsets[s.block_index(Role::recapture, 0)] + t - 2] = logit(0.55 + 0.3 * std::sin(0.7 * t));
    th[s.offsets[s.block_index(Role::recovery, 0)] + t - 2] = logit(0.25 + 0.1 * std::cos(0.5 * t));
  }
  const auto set = [&](Role r, int cls, double natural) {
    th[s.offsets[s.block_index(r, cls)]] = detail::to_theta(r, Form::constant, natural, "truth");
  };
  set(Role::covproc_mu0, 0, -1.0);
  set(Role::covproc_sigma0, 0, 0.4);
  const double mu[4] = {0.0, 0.6, 1.0, 0.8};
  const double sd[4] = {0.45, 0.35, 0.3, 0.3};
  const double eta[4] = {0.7, 0.6, 0.5, 0.6};
  for (int c = 0; c < 4; ++c) {
    set(Role::covproc_mu, c, mu[c]);
    set(Role::covproc_sigma, c, sd[c]);
    set(Role::covproc_eta, c, eta[c]);
  }
  return th;
}

Outcome criterion9() {
  std::string det;
  // ring-recovery shape: d-array only
  const int Th = 20;
  const ModelSpec hs = testutil::heron_spec(Th);
  const ArrayData hd = testutil::heron_data(Th, 1000, 9);
  bool d_only = hd.arrays.m_counts.leftCols(Th - 1).sum() == 0.0;
  const FitResult hf = maximize(hs, hd, Eigen::Vector3d(4.0, 4.0, 4.0));
  det += "heron-shaped: " + std::to_string(hs.dim()) + " parameters, d-array only " + (d_only ? "yes" : "no") +
         ", converged " + (hf.converged ? "yes" : "no");

  // sheep-shaped
  const int T = 25;
  const ModelSpec gen = soay_spec(T, 25, std::array<double, 2>{-3.0, 3.5});
  const SimDataset ds = simulate_from_model(gen, soay_theta(gen), 1500, 9);
  const ModelSpec ss = resolve_spec(soay_spec(T, 25, std::nullopt), ds.data);
  const auto t0 = std::chrono::steady_clock::now();
  FitOptions fo;
  fo.restarts = 1;
  const FitResult sf = maximize(ss, ds.data, Eigen::Vector4d::Constant(16.0), fo);
  const double fit_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  SelectOptions so;
  so.fit.start = sf.packed_hat.theta;
  const SelectionResult sel = staged_cv(ss, ds.data, {0.25, 4.0, 64.0, 1024.0}, 2, 9, 5, 0.9, so);
  const double total_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ostringstream hv;
  for (int j = 0; j < sel.best_h.size(); ++j) hv << (j ? "," : "") << sel.best_h[j];
  det += "; sheep-shaped: " + std::to_string(ss.dim()) + " parameters, converged " +
         (sf.converged ? "yes" : "no") + " (" + fmt(fit_s) + " s), staged h = (" + hv.str() + ") in " +
         fmt(total_s) + " s";
  const bool ok = d_only && hf.converged && ss.dim() == 122 && sf.converged && sel.best_h.size() == 4;
  return {ok, det};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Outcome()>> criteria = {criterion1, criterion2, criterion3,
                                                          criterion4, criterion5, criterion6,
                                                          criterion7, criterion8, criterion9};
  std::set<int> chosen;
  for (int i = 1; i < argc; ++i) chosen.insert(std::stoi(argv[i]));
  int failed = 0;
  for (int c = 1; c <= static_cast<int>(criteria.size()); ++c) {
    if (!chosen.empty() && !chosen.count(c)) continue;
    Outcome o;
    try {
      o = criteria[c - 1]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << c << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
