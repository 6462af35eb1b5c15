#pragma once

// Penalized likelihood assembly, maximization, effective degrees of freedom
// and AIC_p.

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "semicjs/data.hpp"
#include "semicjs/error.hpp"
#include "semicjs/lik_array.hpp"
#include "semicjs/lik_hmm.hpp"
#include "semicjs/model.hpp"
#include "semicjs/numeric.hpp"
#include "semicjs/optimize.hpp"

namespace semicjs {

using Dataset = std::variant<ArrayData, HistoryData>;

inline int data_T(const Dataset& d) {
  if (const auto* a = std::get_if<ArrayData>(&d)) return a->arrays.T;
  return std::get<HistoryData>(d).T;
}

/// Fills in spline domains and the HMM grid left as "auto" in the spec.
inline ModelSpec resolve_spec(ModelSpec spec, const Dataset& data) {
  std::optional<std::array<double, 2>> range;
  if (spec.regime == Regime::hmm_timevarying) {
    const auto* hd = std::get_if<HistoryData>(&data);
    if (!hd) throw InvalidArgument("resolve_spec: hmm regime needs history data");
    if (!spec.hmm_grid) spec.hmm_grid = default_grid_range(*hd);
    range = spec.hmm_grid;
  } else {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    if (const auto* a = std::get_if<ArrayData>(&data)) {
      for (double w : a->covariate) {
        lo = std::min(lo, w);
        hi = std::max(hi, w);
      }
    } else {
      for (const auto& h : std::get<HistoryData>(data).histories) {
        for (const auto& w : h.covariates) {
          if (!w) continue;
          lo = std::min(lo, *w);
          hi = std::max(hi, *w);
        }
      }
    }
    if (lo < hi) {
      const double pad = 0.05 * (hi - lo);
      range = std::array<double, 2>{lo - pad, hi + pad};
    }
  }
  bool changed = false;
  for (auto& b : spec.blocks) {
    if (b.form == Form::spline_in_covariate && !b.domain) {
      if (!range) throw InvalidArgument("resolve_spec: cannot infer spline domain (no covariate spread)");
      b.domain = range;
      changed = true;
    }
  }
  if (changed || !spec.resolved()) spec.finalize();
  return spec;
}

/// Unpenalized log-likelihood of a dataset under one model, with gradient.
class Objective {
 public:
  Objective(ModelSpec spec, Dataset data) : spec_(std::move(spec)), data_(std::move(data)) {
    if (data_T(data_) != spec_.T) throw InvalidArgument("Objective: data T differs from model T");
    if (!spec_.resolved()) throw InvalidArgument("Objective: spline domains unresolved (call resolve_spec)");
    switch (spec_.regime) {
      case Regime::array_global:
        if (!std::holds_alternative<ArrayData>(data_)) {
          throw InvalidArgument("Objective: array regime needs m/d-array data");
        }
        validate(std::get<ArrayData>(data_).arrays);
        break;
      case Regime::history_constant:
      case Regime::hmm_timevarying:
        if (!std::holds_alternative<HistoryData>(data_)) {
          throw InvalidArgument("Objective: " + to_string(spec_.regime) + " regime needs history data");
        }
        if (spec_.regime == Regime::hmm_timevarying) {
          hmm_ = std::make_shared<HmmLikelihood>(spec_, std::get<HistoryData>(data_));
        } else {
          for (const auto& h : std::get<HistoryData>(data_).histories) validate(h, spec_.T);
        }
        break;
    }
  }

  const ModelSpec& spec() const { return spec_; }
  const Dataset& data() const { return data_; }
  int dim() const { return spec_.dim(); }
  bool analytic_gradient() const { return static_cast<bool>(hmm_); }

  double loglik(const Eigen::Ref<const Eigen::VectorXd>& theta) const {
    if (hmm_) return hmm_->evaluate(theta);
    if (spec_.regime == Regime::array_global) {
      return loglik_array_model(std::get<ArrayData>(data_), spec_, theta);
    }
    const auto& hs = std::get<HistoryData>(data_).histories;
    std::vector<double> parts(hs.size());
    for (std::size_t i = 0; i < hs.size(); ++i) {
      parts[i] = loglik_history(hs[i], individual_rates(hs[i], spec_, theta));
      if (!std::isfinite(parts[i])) return kNegInf;
    }
    return pairwise_sum(parts);
  }

  /// Log-likelihood and gradient (analytic for the hmm regime, central
  /// differences otherwise).
  double loglik(const Eigen::Ref<const Eigen::VectorXd>& theta, Eigen::VectorXd& grad) const {
    if (hmm_) return hmm_->evaluate(theta, &grad);
    const double f = loglik(theta);
    grad.resize(theta.size());
    if (!std::isfinite(f)) {
      grad.setZero();
      return f;
    }
    Eigen::VectorXd x = theta;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double h = 1e-7 * std::max(1.0, std::abs(theta[i]));
      x[i] = theta[i] + h;
      const double fp = loglik(x);
      x[i] = theta[i] - h;
      const double fm = loglik(x);
      x[i] = theta[i];
      if (std::isfinite(fp) && std::isfinite(fm)) {
        grad[i] = (fp - fm) / (2.0 * h);
      } else if (std::isfinite(fp)) {
        grad[i] = (fp - f) / h;
      } else if (std::isfinite(fm)) {
        grad[i] = (f - fm) / h;
      } else {
        grad[i] = 0.0;
      }
    }
    return f;
  }

  /// Observed information (negative Hessian), symmetrized. With `free`
  /// non-empty only that block is computed; the rest is left zero.
  Eigen::MatrixXd information(const Eigen::Ref<const Eigen::VectorXd>& theta, const std::vector<int>& free = {}) const {
    const Eigen::Index n = theta.size();
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd x = theta;
    if (!free.empty()) {
      std::vector<char> on(n, 0);
      for (int i : free) on[i] = 1;
      if (hmm_) {
        Eigen::VectorXd gp, gm;
        for (int i : free) {
          const double h = 1e-5 * std::max(1.0, std::abs(theta[i]));
          x[i] = theta[i] + h;
          hmm_->evaluate(x, &gp);
          x[i] = theta[i] - h;
          hmm_->evaluate(x, &gm);
          x[i] = theta[i];
          for (int j : free) H(j, i) = (gp[j] - gm[j]) / (2.0 * h);
        }
        return -0.5 * (H + H.transpose());
      }
      const Eigen::MatrixXd full = information(theta);
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
          if (on[i] && on[j]) H(i, j) = full(i, j);
        }
      }
      return H;
    }
    if (hmm_) {
      Eigen::VectorXd gp, gm;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double h = 1e-5 * std::max(1.0, std::abs(theta[i]));
        x[i] = theta[i] + h;
        hmm_->evaluate(x, &gp);
        x[i] = theta[i] - h;
        hmm_->evaluate(x, &gm);
        x[i] = theta[i];
        H.col(i) = (gp - gm) / (2.0 * h);
      }
    } else {
      const double f0 = loglik(theta);
      std::vector<double> hs(n);
      for (Eigen::Index i = 0; i < n; ++i) hs[i] = 1e-4 * std::max(1.0, std::abs(theta[i]));
      for (Eigen::Index i = 0; i < n; ++i) {
        x[i] = theta[i] + hs[i];
        const double fp = loglik(x);
        x[i] = theta[i] - hs[i];
        const double fm = loglik(x);
        x[i] = theta[i];
        H(i, i) = (fp - 2.0 * f0 + fm) / (hs[i] * hs[i]);
        for (Eigen::Index j = 0; j < i; ++j) {
          double acc = 0.0;
          for (int si : {1, -1}) {
            for (int sj : {1, -1}) {
              x[i] = theta[i] + si * hs[i];
              x[j] = theta[j] + sj * hs[j];
              acc += si * sj * loglik(x);
            }
          }
          x[i] = theta[i];
          x[j] = theta[j];
          H(i, j) = H(j, i) = acc / (4.0 * hs[i] * hs[j]);
        }
      }
    }
    return -0.5 * (H + H.transpose());
  }

  double max_tail_mass() const { return hmm_ ? hmm_->last_max_tail_mass() : 0.0; }

 private:
  ModelSpec spec_;
  Dataset data_;
  std::shared_ptr<HmmLikelihood> hmm_;
};

inline double penalty_value(const ModelSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& theta,
                            const Eigen::Ref<const Eigen::VectorXd>& h_vec) {
  if (spec.n_smooths() == 0) return 0.0;
  return penalty(penalty_vector(spec, theta, h_vec));
}

inline double penalized_loglik(const ModelSpec& spec, const PackedParams& packed, const Dataset& data,
                               const Eigen::Ref<const Eigen::VectorXd>& h_vec) {
  const Objective obj(resolve_spec(spec, data), data);
  const double ll = obj.loglik(packed.theta);
  if (!std::isfinite(ll)) return ll;
  return ll - penalty_value(obj.spec(), packed.theta, h_vec);
}

struct FitOptions {
  int restarts = 5;
  double tol = 1e-6;
  int max_iter = 1000;
  unsigned long long seed = 1;
  std::optional<Eigen::VectorXd> start;  // replaces the all-zero first start
  std::vector<int> free;                 // indices optimized; empty = all
  bool compute_edf = true;
  // Initial curvature of -loglik (full dimension), e.g. a previous fit's information.
  std::optional<Eigen::MatrixXd> init_hessian;
};

struct FitResult {
  ModelSpec spec;
  PackedParams packed_hat;
  Eigen::VectorXd h_vec;
  double loglik_unpen = kNegInf;
  double loglik_pen = kNegInf;
  std::optional<double> edf;
  std::optional<double> aic;
  std::optional<Eigen::MatrixXd> information;  // observed, unpenalized
  bool converged = false;
  int n_restarts_used = 0;
  double gradient_norm = std::numeric_limits<double>::infinity();
  int iterations = 0;
  std::vector<std::string> warnings;
};

/// Effective degrees of freedom trace(I (I + S)^-1) at theta.
inline double effective_df(const Eigen::MatrixXd& I, const Eigen::MatrixXd& S) {
  const Eigen::MatrixXd P = I + S;
  if (!P.allFinite()) throw SingularInformation("effective_df: information matrix not finite");
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(P, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > 1e12) {
    throw SingularInformation("effective_df: penalized information is singular (condition number " +
                              (lo > 0.0 ? std::to_string(hi / lo) : std::string("inf")) + ")");
  }
  const Eigen::LLT<Eigen::MatrixXd> llt(P);
  if (llt.info() != Eigen::Success) throw SingularInformation("effective_df: Cholesky failed");
  return (llt.solve(I)).trace();  // tr(P^-1 I) = tr(I P^-1)
}

inline double effective_df(const Objective& obj, const Eigen::Ref<const Eigen::VectorXd>& theta,
                           const Eigen::Ref<const Eigen::VectorXd>& h_vec) {
  return effective_df(obj.information(theta), full_penalty_hessian(obj.spec(), h_vec));
}

inline double effective_df(const ModelSpec& spec, const Dataset& data, const PackedParams& packed_hat,
                           const Eigen::Ref<const Eigen::VectorXd>& h_vec) {
  const Objective obj(resolve_spec(spec, data), data);
  return effective_df(obj, packed_hat.theta, h_vec);
}

inline double aic_p(double loglik_unpen, double edf) { return -2.0 * loglik_unpen + 2.0 * edf; }

inline double aic_p(const FitResult& fit) {
  if (!fit.edf) throw SingularInformation("aic_p: effective degrees of freedom unavailable");
  return aic_p(fit.loglik_unpen, *fit.edf);
}

inline FitResult maximize(const Objective& obj, const Eigen::Ref<const Eigen::VectorXd>& h_vec,
                          const FitOptions& opt = {}) {
  const ModelSpec& spec = obj.spec();
  const int n = spec.dim();
  if (opt.restarts < 1) throw InvalidArgument("maximize: restarts must be >= 1");
  if (h_vec.size() != spec.n_smooths()) {
    throw InvalidArgument("maximize: h_vec length " + std::to_string(h_vec.size()) + " differs from " +
                          std::to_string(spec.n_smooths()) + " smooths");
  }
  for (Eigen::Index j = 0; j < h_vec.size(); ++j) {
    if (!(h_vec[j] >= 0.0) || !std::isfinite(h_vec[j])) throw InvalidArgument("maximize: h must be finite and >= 0");
  }
  std::vector<int> free = opt.free;
  if (free.empty()) {
    free.resize(n);
    for (int i = 0; i < n; ++i) free[i] = i;
  }
  const int nf = static_cast<int>(free.size());
  const Eigen::MatrixXd S_full = full_penalty_hessian(spec, h_vec);
  Eigen::MatrixXd S(nf, nf);
  for (int a = 0; a < nf; ++a) {
    for (int b = 0; b < nf; ++b) S(a, b) = S_full(free[a], free[b]);
  }
  Eigen::VectorXd base = opt.start ? *opt.start : Eigen::VectorXd::Zero(n);
  if (base.size() != n) throw InvalidArgument("maximize: start vector has wrong length");

  // Penalty cross terms with fixed coordinates enter linearly.
  Eigen::VectorXd fixed_part = base;
  for (int i : free) fixed_part[i] = 0.0;
  Eigen::VectorXd lin(nf);
  const Eigen::VectorXd Sfix = S_full * fixed_part;
  for (int a = 0; a < nf; ++a) lin[a] = Sfix[free[a]];

  const auto expand = [&](const Eigen::VectorXd& z) {
    Eigen::VectorXd x = fixed_part;
    for (int a = 0; a < nf; ++a) x[free[a]] = z[a];
    return x;
  };
  const GradObjective f = [&](const Eigen::VectorXd& z, Eigen::VectorXd* g) {
    const Eigen::VectorXd x = expand(z);
    double ll;
    if (g) {
      Eigen::VectorXd gx;
      ll = obj.loglik(x, gx);
      g->resize(nf);
      for (int a = 0; a < nf; ++a) (*g)[a] = -gx[free[a]] + lin[a];
    } else {
      ll = obj.loglik(x);
    }
    if (!std::isfinite(ll)) return std::numeric_limits<double>::infinity();
    return -ll + z.dot(lin);
  };

  Eigen::MatrixXd B0;
  if (opt.init_hessian) {
    if (opt.init_hessian->rows() != n || opt.init_hessian->cols() != n) {
      throw InvalidArgument("maximize: init_hessian has wrong size");
    }
    Eigen::MatrixXd sub(nf, nf);
    for (int a = 0; a < nf; ++a) {
      for (int b = 0; b < nf; ++b) sub(a, b) = (*opt.init_hessian)(free[a], free[b]);
    }
    // clip to positive definite
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (sub + sub.transpose()));
    if (es.info() == Eigen::Success && nf > 0) {
      const double top = std::max(es.eigenvalues().cwiseAbs().maxCoeff(), 1e-8);
      const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(1e-6 * top);
      B0 = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    }
  }

  OptimOptions oo;
  oo.tol = opt.tol;
  oo.max_iter = opt.max_iter;
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  OptimResult best;
  bool any = false;
  int used = 0;
  Eigen::VectorXd z0(nf);
  for (int a = 0; a < nf; ++a) z0[a] = base[free[a]];
  for (int r = 0; r < opt.restarts; ++r) {
    Eigen::VectorXd z = z0;
    if (r > 0) {
      for (int a = 0; a < nf; ++a) z[a] += jitter(rng);
    }
    ++used;
    OptimResult res = minimize_bfgs(f, S, z, oo, B0);
    if (!std::isfinite(res.value)) continue;
    if (!any || res.value < best.value - 1e-9 || (res.converged && !best.converged && res.value <= best.value + 1e-9)) {
      best = std::move(res);
      any = true;
    }
  }
  if (!any) throw FittingFailed("maximize: log-likelihood is -inf at every starting point");

  FitResult out;
  out.spec = spec;
  out.packed_hat = make_packed(spec, expand(best.x));
  out.h_vec = h_vec;
  out.loglik_unpen = obj.loglik(out.packed_hat.theta);
  out.loglik_pen = out.loglik_unpen - penalty_value(spec, out.packed_hat.theta, h_vec);
  out.converged = best.converged;
  out.n_restarts_used = used;
  out.gradient_norm = best.grad_norm;
  out.iterations = best.iterations;
  if (obj.max_tail_mass() > 0.01) {
    out.warnings.push_back("covariate grid too narrow: transition tail mass " +
                           std::to_string(obj.max_tail_mass()) + " beyond grid");
  }
  if (!out.converged) out.warnings.push_back("optimizer did not converge: " + best.message);
  if (opt.compute_edf) {
    try {
      out.information = obj.information(out.packed_hat.theta);
      out.edf = effective_df(*out.information, full_penalty_hessian(spec, h_vec));
      out.aic = aic_p(out.loglik_unpen, *out.edf);
    } catch (const SingularInformation& e) {
      out.warnings.push_back(e.what());
    }
  }
  return out;
}

inline FitResult maximize(const ModelSpec& spec, const Dataset& data, const Eigen::Ref<const Eigen::VectorXd>& h_vec,
                          const FitOptions& opt = {}) {
  const Objective obj(resolve_spec(spec, data), data);
  return maximize(obj, h_vec, opt);
}

}  // namespace semicjs
