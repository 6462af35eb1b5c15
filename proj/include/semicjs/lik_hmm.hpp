#pragma once

// Approximate likelihood for a stochastically time-varying individual
// covariate: the covariate range is cut into m bins and each history is scored
// by the forward algorithm on the augmented state space
//   alive-in-bin-1 .. alive-in-bin-m, recently dead, long dead   (m + 2 states).
//
// Where the covariate is recorded, the alive state sits in the bin containing
// the value but every factor touching it (survival, the transition density
// into it, the transition out of it, the initial density) is evaluated at the
// recorded value itself rather than at the bin midpoint. Unrecorded values are
// integrated over the bins with masses from the normal transition CDF; tail
// mass outside the grid is folded into the boundary bins.

#include <algorithm>
#include <array>
#include <limits>
#include <numbers>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "semicjs/data.hpp"
#include "semicjs/error.hpp"
#include "semicjs/lik_array.hpp"
#include "semicjs/model.hpp"
#include "semicjs/numeric.hpp"

namespace semicjs {

struct CovGrid {
  int m = 0;
  double lo = 0.0;
  double hi = 1.0;
  double width = 1.0;
  std::vector<double> edges;
  std::vector<double> midpoints;

  int bin_of(double w) const {
    const int k = static_cast<int>(std::floor((w - lo) / width));
    return std::clamp(k, 0, m - 1);
  }
};

inline CovGrid make_grid(int m, double lo, double hi) {
  if (m < 2) throw InvalidArgument("make_grid: need at least 2 bins");
  if (!(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi)) {
    throw InvalidArgument("make_grid: degenerate range");
  }
  CovGrid g;
  g.m = m;
  g.lo = lo;
  g.hi = hi;
  g.width = (hi - lo) / m;
  g.edges.resize(m + 1);
  g.midpoints.resize(m);
  for (int i = 0; i <= m; ++i) g.edges[i] = lo + i * g.width;
  g.edges[m] = hi;
  for (int i = 0; i < m; ++i) g.midpoints[i] = lo + (i + 0.5) * g.width;
  return g;
}

inline CovGrid make_grid(const ModelSpec& spec) {
  if (!spec.hmm_grid) throw InvalidArgument("make_grid: model has no resolved hmm grid");
  return make_grid(spec.hmm_bins, (*spec.hmm_grid)[0], (*spec.hmm_grid)[1]);
}

/// Observed covariate range widened by 3 SD of observed one-step increments.
inline std::array<double, 2> default_grid_range(const HistoryData& data) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  std::vector<double> inc;
  std::vector<double> all;
  for (const auto& h : data.histories) {
    for (int t = 1; t <= h.T(); ++t) {
      const auto w = h.covariates[t - 1];
      if (!w) continue;
      lo = std::min(lo, *w);
      hi = std::max(hi, *w);
      all.push_back(*w);
      if (t < h.T() && h.covariates[t]) inc.push_back(*h.covariates[t] - *w);
    }
  }
  if (all.empty()) throw InvalidArgument("default_grid_range: no recorded covariate values");
  const auto sd = [](const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
  };
  double spread = inc.size() >= 2 ? sd(inc) : (all.size() >= 2 ? sd(all) : 1.0);
  if (!(spread > 0.0)) spread = std::max(1e-3, 0.1 * std::abs(hi));
  return {lo - 3.0 * spread, hi + 3.0 * spread};
}

/// Bin masses of N(mean, sd^2), tails folded into the two boundary bins, and
/// optionally their derivatives with respect to mean and sd.
inline void bin_masses(const CovGrid& g, double mean, double sd, double* mass,
                       double* dmean = nullptr, double* dsd = nullptr) {
  const int m = g.m;
  // Interior edges 1..m-1; each stores the smaller tail to avoid cancellation.
  double prev_tail = 0.0;   // lower tail at edge 0 (= -inf)
  bool prev_upper = false;
  double prev_pdf = 0.0;
  double prev_zpdf = 0.0;
  for (int k = 0; k < m; ++k) {
    double tail, pdf = 0.0, zpdf = 0.0;
    bool upper;
    if (k + 1 < m) {
      const double z = (g.edges[k + 1] - mean) / sd;
      upper = z > 0.0;
      if (std::abs(z) > 9.0) {
        tail = 0.0;  // below 1e-19
      } else {
        tail = 0.5 * std::erfc(std::abs(z) / std::numbers::sqrt2);
        pdf = normal_pdf(z);
        zpdf = z * pdf;
      }
    } else {
      upper = true;  // edge m is +inf: upper tail 0
      tail = 0.0;
    }
    double v;
    if (!prev_upper && !upper) {
      v = tail - prev_tail;
    } else if (prev_upper && upper) {
      v = prev_tail - tail;
    } else {
      v = 1.0 - prev_tail - tail;
    }
    mass[k] = std::max(v, 0.0);
    if (dmean) dmean[k] = (prev_pdf - pdf) / sd;
    if (dsd) dsd[k] = (prev_zpdf - zpdf) / sd;
    prev_tail = tail;
    prev_upper = upper;
    prev_pdf = pdf;
    prev_zpdf = zpdf;
  }
}

/// Largest probability mass that a one-step transition from any bin midpoint
/// (any age class) places outside [lo, hi].
inline double max_tail_mass(const CovGrid& g, const CovProcess& cp) {
  double worst = 0.0;
  for (std::size_t a = 0; a < cp.mu.size(); ++a) {
    for (double x : g.midpoints) {
      const double mean = x + cp.eta[a] * (cp.mu[a] - x);
      const double out = normal_cdf((g.lo - mean) / cp.sigma[a]) +
                         normal_cdf(-(g.hi - mean) / cp.sigma[a]);
      worst = std::max(worst, out);
    }
  }
  return worst;
}

struct TransitionMatrix {
  Eigen::MatrixXd matrix;  // (m+2) x (m+2)
  double max_tail_mass = 0.0;
  bool grid_too_narrow = false;
};

/// Bin-to-bin transition t -> t+1 for survival class `surv_class` (at t) and
/// covariate-process class `proc_class` (at t+1).
inline TransitionMatrix build_transition(const CovGrid& g, const ModelSpec& spec, const PackedParams& packed,
                                         int surv_class, int proc_class, int t = 1) {
  const int m = g.m;
  const CovProcess cp = covariate_process(spec, packed.theta);
  const int bi = spec.block_index(Role::survival, surv_class);
  TransitionMatrix out;
  out.matrix = Eigen::MatrixXd::Zero(m + 2, m + 2);
  std::vector<double> mass(m);
  for (int j = 0; j < m; ++j) {
    const double x = g.midpoints[j];
    const double phi = block_probability(spec, bi, packed.theta, t, x);
    bin_masses(g, x + cp.eta[proc_class] * (cp.mu[proc_class] - x), cp.sigma[proc_class], mass.data());
    for (int k = 0; k < m; ++k) out.matrix(j, k) = phi * mass[k];
    out.matrix(j, m) = 1.0 - phi;
  }
  out.matrix(m, m + 1) = 1.0;
  out.matrix(m + 1, m + 1) = 1.0;
  CovProcess one = cp;
  one.mu = {cp.mu[proc_class]};
  one.sigma = {cp.sigma[proc_class]};
  one.eta = {cp.eta[proc_class]};
  out.max_tail_mass = max_tail_mass(g, one);
  out.grid_too_narrow = out.max_tail_mass > 0.01;
  return out;
}

inline TransitionMatrix build_transition(const CovGrid& g, const ModelSpec& spec, const PackedParams& packed,
                                         int age_class) {
  return build_transition(g, spec, packed, age_class, age_class, 1);
}

/// Observation probabilities at occasion t for every augmented state.
inline Eigen::VectorXd emission(const CovGrid& g, const ModelSpec& spec, const PackedParams& packed, int code,
                                std::optional<double> cov_obs, int t, int age_class = 0) {
  if (code < 0 || code > 2) throw InvalidArgument("emission: code must be 0, 1 or 2");
  if (cov_obs && code != 1) throw InvalidArgument("emission: covariate recorded without a live capture");
  const int m = g.m;
  const double p = block_probability(spec, spec.block_index(Role::recapture, age_class), packed.theta, t, 0.0);
  const double lam = block_probability(spec, spec.block_index(Role::recovery, age_class), packed.theta, t, 0.0);
  Eigen::VectorXd e = Eigen::VectorXd::Zero(m + 2);
  switch (code) {
    case 0:
      e.head(m).setConstant(1.0 - p);
      e[m] = 1.0 - lam;
      e[m + 1] = 1.0;
      break;
    case 1:
      if (cov_obs) {
        e[g.bin_of(*cov_obs)] = p;
      } else {
        e.head(m).setConstant(p);
      }
      break;
    case 2: e[m] = lam; break;
  }
  return e;
}

/// Forward-algorithm log-likelihood of one history and its recorded covariates,
/// conditional on first capture. Straightforward dense implementation; the
/// dataset evaluator below is the fast path.
inline double loglik_hmm(const EncounterHistory& hist, const CovGrid& g, const ModelSpec& spec,
                         const PackedParams& packed) {
  const int T = spec.T;
  validate(hist, T);
  const int m = g.m;
  const Eigen::VectorXd& theta = packed.theta;
  const CovProcess cp = covariate_process(spec, theta);
  const int c = hist.first_capture();

  Eigen::VectorXd alpha = Eigen::VectorXd::Zero(m + 2);
  if (const auto w0 = hist.covariates[c - 1]) {
    alpha[g.bin_of(*w0)] = normal_density(*w0, cp.mu0, cp.sigma0);
  } else {
    bin_masses(g, cp.mu0, cp.sigma0, alpha.data());
  }
  double ll = 0.0;
  const auto rescale = [&]() {
    const double s = alpha.sum();
    if (!(s > 0.0) || !std::isfinite(s)) return false;
    ll += std::log(s);
    alpha /= s;
    return true;
  };
  if (!rescale()) return kNegInf;

  std::vector<double> mass(m);
  Eigen::MatrixXd M(m + 2, m + 2);
  for (int t = c; t < T; ++t) {
    const int s_cls = spec.age_map.class_of(hist.age_at(t));
    const int p_cls = spec.age_map.class_of(hist.age_at(t + 1));
    const auto w_now = hist.covariates[t - 1];
    const auto w_next = hist.covariates[t];
    const int bi = spec.block_index(Role::survival, s_cls);
    M.setZero();
    for (int j = 0; j < m; ++j) {
      const double x = w_now ? *w_now : g.midpoints[j];
      const double phi = block_probability(spec, bi, theta, t, x);
      const double mean = x + cp.eta[p_cls] * (cp.mu[p_cls] - x);
      if (w_next) {
        M(j, g.bin_of(*w_next)) = phi * normal_density(*w_next, mean, cp.sigma[p_cls]);
      } else {
        bin_masses(g, mean, cp.sigma[p_cls], mass.data());
        for (int k = 0; k < m; ++k) M(j, k) = phi * mass[k];
      }
      M(j, m) = 1.0 - phi;
    }
    M(m, m + 1) = 1.0;
    M(m + 1, m + 1) = 1.0;
    const Eigen::VectorXd e = emission(g, spec, packed, hist.codes[t], w_next, t + 1, p_cls);
    alpha = (M.transpose() * alpha).cwiseProduct(e);
    if (!rescale()) return kNegInf;
  }
  return ll;
}

/// Fast evaluator of the summed forward-algorithm log-likelihood over a set of
/// histories, with its exact gradient.
///
/// Every history is run forward only up to its last recorded event. The
/// probability of "nothing observed from t to T" depends only on (t, age) and
/// is computed once per evaluation as a backward vector shared by all
/// histories; gradients flow back through those shared vectors.
class HmmLikelihood {
 public:
  HmmLikelihood(const ModelSpec& spec, const HistoryData& data)
      : spec_(spec), grid_(make_grid(spec)), T_(spec.T), m_(spec.hmm_bins),
        ncls_(spec.n_classes()), cap_(spec.age_map.age_cap()) {
    if (spec.regime != Regime::hmm_timevarying) {
      throw InvalidArgument("HmmLikelihood: model regime is not hmm_timevarying");
    }
    if (data.T != T_) throw InvalidArgument("HmmLikelihood: data T differs from model T");
    if (!spec.resolved()) throw InvalidArgument("HmmLikelihood: spline domains unresolved");
    for (const auto& h : data.histories) prepare(h);
  }

  const CovGrid& grid() const { return grid_; }
  std::size_t size() const { return inds_.size(); }
  double last_max_tail_mass() const { return last_tail_mass_; }

  /// Per-history log-likelihoods (in data order).
  std::vector<double> individual(const Eigen::Ref<const Eigen::VectorXd>& theta) const {
    Workspace ws;
    setup(theta, ws, false);
    std::vector<double> out(inds_.size());
    for (std::size_t i = 0; i < inds_.size(); ++i) out[i] = run(inds_[i], theta, ws, nullptr);
    return out;
  }

  /// Sum over histories; if grad is non-null it receives d loglik / d theta.
  double evaluate(const Eigen::Ref<const Eigen::VectorXd>& theta, Eigen::VectorXd* grad = nullptr) const {
    Workspace ws;
    setup(theta, ws, grad != nullptr);
    std::vector<double> parts(inds_.size());
    for (std::size_t i = 0; i < inds_.size(); ++i) {
      parts[i] = run(inds_[i], theta, ws, grad ? &ws : nullptr);
      if (!std::isfinite(parts[i])) {
        if (grad) grad->setZero(theta.size());
        return kNegInf;
      }
    }
    const double total = pairwise_sum(parts);
    if (grad) *grad = finish_gradient(theta, ws);
    return total;
  }

 private:
  struct Step {
    int code = 0;                 // observation code at this occasion
    std::optional<double> obs;    // recorded covariate
    int age_class = 0;
  };
  struct Individual {
    int c = 0;         // first capture
    int end = 0;       // last occasion of the explicit forward pass
    int tail_age = 0;  // capped age at `end`
    std::vector<Step> steps;  // occasions c..end
  };

  struct Emit {
    double a = 0.0, rd = 0.0, ld = 0.0;
  };

  struct Workspace {
    CovProcess cp;
    std::vector<Eigen::MatrixXd> Q;          // per process class, m x m
    std::vector<Eigen::VectorXd> phi_mid;    // [class * T + (t-1)]
    std::vector<double> p, lam;              // [class * (T+1) + t]
    std::vector<Eigen::VectorXd> tails;      // [t * (cap+1) + age]
    std::vector<char> have_tail;
    // gradient accumulators
    bool want_grad = false;
    std::vector<Eigen::VectorXd> g_phi_mid;
    std::vector<double> g_p, g_lam;
    std::vector<std::vector<double>> gq_u, gq_v;  // per process class, stacked columns
    std::vector<double> g_mu, g_sigma, g_eta;
    double g_mu0 = 0.0, g_sigma0 = 0.0;
    std::vector<Eigen::VectorXd> tail_adj;
    std::vector<char> has_tail_adj;
    Eigen::VectorXd g_theta;  // exact-point survival contributions
  };

  void prepare(const EncounterHistory& h) {
    validate(h, T_);
    Individual ind;
    ind.c = h.first_capture();
    const int L = h.last_event();
    const bool point_at_L = h.codes[L - 1] == 1 && h.covariates[L - 1].has_value();
    ind.end = (point_at_L && L < T_) ? L + 1 : L;
    for (int t = ind.c; t <= ind.end; ++t) {
      Step s;
      s.code = h.codes[t - 1];
      s.obs = h.covariates[t - 1];
      s.age_class = spec_.age_map.class_of(h.age_at(t));
      ind.steps.push_back(s);
    }
    ind.tail_age = std::min(h.age_at(ind.end), cap_);
    ages_first_.push_back(h.age_at_first);
    inds_.push_back(std::move(ind));
    (void)ages_first_;
  }

  int tail_key(int t, int age) const { return t * (cap_ + 1) + age; }
  int cls_t(int cls, int t) const { return cls * T_ + (t - 1); }
  int cls_e(int cls, int t) const { return cls * (T_ + 1) + t; }

  void setup(const Eigen::Ref<const Eigen::VectorXd>& theta, Workspace& ws, bool grad) const {
    ws.cp = covariate_process(spec_, theta);
    ws.Q.assign(ncls_, Eigen::MatrixXd(m_, m_));
    std::vector<double> row(m_);
    for (int a = 0; a < ncls_; ++a) {
      for (int j = 0; j < m_; ++j) {
        const double x = grid_.midpoints[j];
        bin_masses(grid_, x + ws.cp.eta[a] * (ws.cp.mu[a] - x), ws.cp.sigma[a], row.data());
        for (int k = 0; k < m_; ++k) ws.Q[a](j, k) = row[k];
      }
    }
    last_tail_mass_ = max_tail_mass(grid_, ws.cp);
    ws.phi_mid.assign(ncls_ * T_, Eigen::VectorXd());
    for (int a = 0; a < ncls_; ++a) {
      const int bi = spec_.block_index(Role::survival, a);
      const bool time_dep = spec_.blocks[bi].form == Form::per_occasion ||
                            spec_.blocks[bi].form == Form::logistic_linear_in_time;
      for (int t = 1; t < T_; ++t) {
        if (!time_dep && t > 1) {
          ws.phi_mid[cls_t(a, t)] = ws.phi_mid[cls_t(a, 1)];
          continue;
        }
        Eigen::VectorXd v(m_);
        for (int j = 0; j < m_; ++j) v[j] = block_probability(spec_, bi, theta, t, grid_.midpoints[j]);
        ws.phi_mid[cls_t(a, t)] = std::move(v);
      }
    }
    ws.p.assign(ncls_ * (T_ + 1), 0.0);
    ws.lam.assign(ncls_ * (T_ + 1), 0.0);
    for (int a = 0; a < ncls_; ++a) {
      const int bp = spec_.block_index(Role::recapture, a);
      const int bl = spec_.block_index(Role::recovery, a);
      for (int t = 2; t <= T_; ++t) {
        ws.p[cls_e(a, t)] = block_probability(spec_, bp, theta, t, 0.0);
        ws.lam[cls_e(a, t)] = block_probability(spec_, bl, theta, t, 0.0);
      }
    }
    const int nkeys = (T_ + 1) * (cap_ + 1);
    ws.tails.assign(nkeys, Eigen::VectorXd());
    ws.have_tail.assign(nkeys, 0);
    ws.want_grad = grad;
    if (grad) {
      ws.g_phi_mid.assign(ncls_ * T_, Eigen::VectorXd::Zero(m_));
      ws.g_p.assign(ncls_ * (T_ + 1), 0.0);
      ws.g_lam.assign(ncls_ * (T_ + 1), 0.0);
      ws.gq_u.assign(ncls_, {});
      ws.gq_v.assign(ncls_, {});
      ws.g_mu.assign(ncls_, 0.0);
      ws.g_sigma.assign(ncls_, 0.0);
      ws.g_eta.assign(ncls_, 0.0);
      ws.g_mu0 = ws.g_sigma0 = 0.0;
      ws.tail_adj.assign(nkeys, Eigen::VectorXd());
      ws.has_tail_adj.assign(nkeys, 0);
      ws.g_theta = Eigen::VectorXd::Zero(theta.size());
    }
  }

  Emit emit_for(const Workspace& ws, int code, int t, int cls) const {
    const double p = ws.p[cls_e(cls, t)];
    const double lam = ws.lam[cls_e(cls, t)];
    switch (code) {
      case 0: return {1.0 - p, 1.0 - lam, 1.0};
      case 1: return {p, 0.0, 0.0};
      default: return {0.0, lam, 0.0};
    }
  }

  /// Backward vector for "no events after t" at capped age `age`.
  const Eigen::VectorXd& tail(int t, int age, Workspace& ws) const {
    const int key = tail_key(t, age);
    if (ws.have_tail[key]) return ws.tails[key];
    Eigen::VectorXd out;
    if (t == T_) {
      out = Eigen::VectorXd::Ones(m_ + 2);
    } else {
      const int next_age = std::min(age + 1, cap_);
      const Eigen::VectorXd& v = tail(t + 1, next_age, ws);
      const int s_cls = spec_.age_map.class_of(age);
      const int p_cls = spec_.age_map.class_of(age + 1);
      out.resize(m_ + 2);
      Eigen::VectorXd qv;
      bwd_dd(v, ws.phi_mid[cls_t(s_cls, t)], ws.Q[p_cls], emit_for(ws, 0, t + 1, p_cls), out, qv);
    }
    ws.tails[key] = std::move(out);
    ws.have_tail[key] = 1;
    return ws.tails[key];
  }

  // ---- step kernels -------------------------------------------------------

  void fwd_dd(const Eigen::VectorXd& u, const Eigen::VectorXd& phi, const Eigen::MatrixXd& Q, const Emit& e,
              Eigen::VectorXd& out) const {
    out.resize(m_ + 2);
    const double alive = u.head(m_).sum();
    if (e.a != 0.0) {
      const Eigen::VectorXd tmp = u.head(m_).cwiseProduct(phi);
      out.head(m_).noalias() = e.a * (Q.transpose() * tmp);
      out[m_] = e.rd * (alive - tmp.sum());
    } else {
      out.head(m_).setZero();
      out[m_] = e.rd * (alive - u.head(m_).dot(phi));
    }
    out[m_ + 1] = e.ld * (u[m_] + u[m_ + 1]);
  }

  /// out = M (e o v); qv = Q v_alive (needed again by the adjoint).
  void bwd_dd(const Eigen::VectorXd& v, const Eigen::VectorXd& phi, const Eigen::MatrixXd& Q, const Emit& e,
              Eigen::VectorXd& out, Eigen::VectorXd& qv) const {
    out.resize(m_ + 2);
    if (e.a != 0.0) {
      qv.noalias() = Q * v.head(m_);
      out.head(m_) = e.a * phi.cwiseProduct(qv);
    } else {
      qv = Eigen::VectorXd::Zero(m_);
      out.head(m_).setZero();
    }
    out.head(m_) += (e.rd * v[m_]) * (Eigen::VectorXd::Ones(m_) - phi);
    out[m_] = e.ld * v[m_ + 1];
    out[m_ + 1] = e.ld * v[m_ + 1];
  }

  void add_emit_grad(Workspace& ws, int code, int t, int cls, double d_a, double d_rd) const {
    const int key = cls_e(cls, t);
    switch (code) {
      case 0:
        ws.g_p[key] -= d_a;
        ws.g_lam[key] -= d_rd;
        break;
      case 1: ws.g_p[key] += d_a; break;
      default: ws.g_lam[key] += d_rd; break;
    }
  }

  /// Adjoint of u^T M (e o v) for a dense -> dense step, scaled by w.
  void adj_dd(Workspace& ws, const Eigen::VectorXd& u, const Eigen::VectorXd& v, const Eigen::VectorXd& qv,
              int s_cls, int p_cls, int t, int code, const Emit& e, double w) const {
    const Eigen::VectorXd& phi = ws.phi_mid[cls_t(s_cls, t)];
    Eigen::VectorXd& gphi = ws.g_phi_mid[cls_t(s_cls, t)];
    const double vrd = v[m_];
    gphi += w * u.head(m_).cwiseProduct(e.a * qv - Eigen::VectorXd::Constant(m_, e.rd * vrd));
    double d_a = 0.0;
    if (e.a != 0.0) {
      const Eigen::VectorXd phiu = u.head(m_).cwiseProduct(phi);
      d_a = w * phiu.dot(qv);
      auto& U = ws.gq_u[p_cls];
      auto& V = ws.gq_v[p_cls];
      for (int j = 0; j < m_; ++j) U.push_back(w * phiu[j]);
      for (int k = 0; k < m_; ++k) V.push_back(e.a * v[k]);
    }
    const double d_rd = w * (u.head(m_).sum() - u.head(m_).dot(phi)) * vrd;
    add_emit_grad(ws, code, t + 1, p_cls, d_a, d_rd);
  }

  void add_density_grad(Workspace& ws, int p_cls, double x_from, double x_to, double coef) const {
    // coef * d dens / d(.) / dens, i.e. gradient of coef * log dens
    const double mean = x_from + ws.cp.eta[p_cls] * (ws.cp.mu[p_cls] - x_from);
    const double sd = ws.cp.sigma[p_cls];
    const double r = x_to - mean;
    const double dmean = coef * r / (sd * sd);
    ws.g_sigma[p_cls] += coef * (r * r / (sd * sd * sd) - 1.0 / sd);
    ws.g_mu[p_cls] += dmean * ws.cp.eta[p_cls];
    ws.g_eta[p_cls] += dmean * (ws.cp.mu[p_cls] - x_from);
  }

  void add_mass_grad(Workspace& ws, int p_cls, double x_from, const double* coef) const {
    const double mean = x_from + ws.cp.eta[p_cls] * (ws.cp.mu[p_cls] - x_from);
    std::vector<double> mass(m_), dm(m_), ds(m_);
    bin_masses(grid_, mean, ws.cp.sigma[p_cls], mass.data(), dm.data(), ds.data());
    double dmean = 0.0;
    double dsig = 0.0;
    for (int k = 0; k < m_; ++k) {
      dmean += coef[k] * dm[k];
      dsig += coef[k] * ds[k];
    }
    ws.g_sigma[p_cls] += dsig;
    ws.g_mu[p_cls] += dmean * ws.cp.eta[p_cls];
    ws.g_eta[p_cls] += dmean * (ws.cp.mu[p_cls] - x_from);
  }

  double survival_at(const Eigen::Ref<const Eigen::VectorXd>& theta, int s_cls, int t, double w) const {
    return block_probability(spec_, spec_.block_index(Role::survival, s_cls), theta, t, w);
  }

  // ---- one history ----------------------------------------------------------

  double run(const Individual& ind, const Eigen::Ref<const Eigen::VectorXd>& theta, Workspace& ws,
             Workspace* grad) const {
    const int n = static_cast<int>(ind.steps.size());
    // Normalized forward states; point states carry no vector.
    std::vector<Eigen::VectorXd> alpha(n);
    std::vector<char> is_point(n, 0);
    double ll = 0.0;
    const Step& s0 = ind.steps[0];
    if (s0.obs) {
      is_point[0] = 1;
      const double d = normal_density(*s0.obs, ws.cp.mu0, ws.cp.sigma0);
      if (!(d > 0.0)) return kNegInf;
      ll += std::log(d);
    } else {
      alpha[0] = Eigen::VectorXd::Zero(m_ + 2);
      bin_masses(grid_, ws.cp.mu0, ws.cp.sigma0, alpha[0].data());
      const double s = alpha[0].sum();
      if (!(s > 0.0)) return kNegInf;
      ll += std::log(s);
      alpha[0] /= s;
    }
    std::vector<double> mass(m_);
    for (int i = 0; i + 1 < n; ++i) {
      const int t = ind.c + i;
      const Step& from = ind.steps[i];
      const Step& to = ind.steps[i + 1];
      const int s_cls = from.age_class;
      const int p_cls = to.age_class;
      const Emit e = emit_for(ws, to.code, t + 1, p_cls);
      const double mu = ws.cp.mu[p_cls], eta = ws.cp.eta[p_cls], sd = ws.cp.sigma[p_cls];
      const bool to_point = to.code == 1 && to.obs.has_value();
      double scale;
      if (is_point[i]) {
        const double w = *from.obs;
        const double phi = survival_at(theta, s_cls, t, w);
        const double mean = w + eta * (mu - w);
        if (to_point) {
          is_point[i + 1] = 1;
          scale = phi * normal_density(*to.obs, mean, sd) * e.a;
        } else {
          Eigen::VectorXd out = Eigen::VectorXd::Zero(m_ + 2);
          if (e.a != 0.0) {
            bin_masses(grid_, mean, sd, mass.data());
            for (int k = 0; k < m_; ++k) out[k] = e.a * phi * mass[k];
          }
          out[m_] = e.rd * (1.0 - phi);
          scale = out.sum();
          if (scale > 0.0) out /= scale;
          alpha[i + 1] = std::move(out);
        }
      } else {
        const Eigen::VectorXd& phi = ws.phi_mid[cls_t(s_cls, t)];
        if (to_point) {
          is_point[i + 1] = 1;
          double acc = 0.0;
          for (int j = 0; j < m_; ++j) {
            const double u = alpha[i][j];
            if (u == 0.0) continue;
            const double x = grid_.midpoints[j];
            acc += u * phi[j] * normal_density(*to.obs, x + eta * (mu - x), sd);
          }
          scale = acc * e.a;
        } else {
          Eigen::VectorXd out;
          fwd_dd(alpha[i], phi, ws.Q[p_cls], e, out);
          scale = out.sum();
          if (scale > 0.0) out /= scale;
          alpha[i + 1] = std::move(out);
        }
      }
      if (!(scale > 0.0) || !std::isfinite(scale)) return kNegInf;
      ll += std::log(scale);
    }

    // Close with the shared tail vector.
    const int last = n - 1;
    const Eigen::VectorXd* tailv = nullptr;
    double denom = 1.0;
    if (ind.end < T_) {
      tailv = &tail(ind.end, ind.tail_age, ws);
      denom = alpha[last].dot(*tailv);
      if (!(denom > 0.0)) return kNegInf;
      ll += std::log(denom);
    }
    if (!grad) return ll;

    // Backward pass for the adjoints.
    Workspace& g = *grad;
    Eigen::VectorXd v;      // backward vector at occasion of state i+1 (dense)
    double v_point = 1.0;   // backward value when state i+1 is a point
    if (tailv) {
      v = *tailv;
      const int key = tail_key(ind.end, ind.tail_age);
      if (!g.has_tail_adj[key]) {
        g.tail_adj[key] = Eigen::VectorXd::Zero(m_ + 2);
        g.has_tail_adj[key] = 1;
      }
      g.tail_adj[key] += alpha[last] / denom;
    } else if (!is_point[last]) {
      v = Eigen::VectorXd::Ones(m_ + 2);
    }
    Eigen::VectorXd b, qv;
    for (int i = n - 2; i >= 0; --i) {
      const int t = ind.c + i;
      const Step& from = ind.steps[i];
      const Step& to = ind.steps[i + 1];
      const int s_cls = from.age_class;
      const int p_cls = to.age_class;
      const Emit e = emit_for(g, to.code, t + 1, p_cls);
      const double mu = g.cp.mu[p_cls], eta = g.cp.eta[p_cls], sd = g.cp.sigma[p_cls];
      const bool to_point = is_point[i + 1];
      const int bi = spec_.block_index(Role::survival, s_cls);
      if (is_point[i]) {
        const double w = *from.obs;
        const double phi = survival_at(theta, s_cls, t, w);
        const double mean = w + eta * (mu - w);
        double bval;
        if (to_point) {
          // every factor is multiplicative: gradient of the logs
          bval = phi * normal_density(*to.obs, mean, sd) * e.a * v_point;
          add_probability_gradient(spec_, bi, theta, t, w, 1.0 / phi, g.g_theta);
          add_density_grad(g, p_cls, w, *to.obs, 1.0);
          add_emit_grad(g, to.code, t + 1, p_cls, 1.0 / e.a, 0.0);
        } else {
          std::vector<double> coef(m_, 0.0);
          double mv = 0.0;
          if (e.a != 0.0) {
            bin_masses(grid_, mean, sd, mass.data());
            for (int k = 0; k < m_; ++k) mv += mass[k] * v[k];
          }
          bval = phi * e.a * mv + (1.0 - phi) * e.rd * v[m_];
          if (!(bval > 0.0)) continue;
          const double wgt = 1.0 / bval;
          add_probability_gradient(spec_, bi, theta, t, w, wgt * (e.a * mv - e.rd * v[m_]), g.g_theta);
          if (e.a != 0.0) {
            for (int k = 0; k < m_; ++k) coef[k] = wgt * phi * e.a * v[k];
            add_mass_grad(g, p_cls, w, coef.data());
          }
          add_emit_grad(g, to.code, t + 1, p_cls, wgt * phi * mv, wgt * (1.0 - phi) * v[m_]);
        }
        v_point = 1.0;  // normalized backward value for a point state
        v.resize(0);
      } else {
        const Eigen::VectorXd& phi = g.phi_mid[cls_t(s_cls, t)];
        const Eigen::VectorXd& u = alpha[i];
        if (to_point) {
          b = Eigen::VectorXd::Zero(m_ + 2);
          Eigen::VectorXd dens(m_);
          for (int j = 0; j < m_; ++j) {
            const double x = grid_.midpoints[j];
            dens[j] = normal_density(*to.obs, x + eta * (mu - x), sd);
            b[j] = phi[j] * dens[j] * e.a * v_point;
          }
          const double D = u.dot(b);
          if (!(D > 0.0)) continue;
          const double wgt = 1.0 / D;
          Eigen::VectorXd& gphi = g.g_phi_mid[cls_t(s_cls, t)];
          double d_a = 0.0;
          for (int j = 0; j < m_; ++j) {
            if (u[j] == 0.0) continue;
            gphi[j] += wgt * u[j] * dens[j] * e.a * v_point;
            const double kap = wgt * u[j] * phi[j] * e.a * v_point * dens[j];
            add_density_grad(g, p_cls, grid_.midpoints[j], *to.obs, kap);
            d_a += wgt * u[j] * phi[j] * dens[j] * v_point;
          }
          add_emit_grad(g, to.code, t + 1, p_cls, d_a, 0.0);
        } else {
          bwd_dd(v, phi, g.Q[p_cls], e, b, qv);
          const double D = u.dot(b);
          if (!(D > 0.0)) continue;
          adj_dd(g, u, v, qv, s_cls, p_cls, t, to.code, e, 1.0 / D);
        }
        const double nb = b.maxCoeff();
        v = b / (nb > 0.0 ? nb : 1.0);
      }
    }
    // Initial distribution.
    if (is_point[0]) {
      const double w = *s0.obs;
      const double r = w - g.cp.mu0;
      const double sd = g.cp.sigma0;
      g.g_mu0 += r / (sd * sd);
      g.g_sigma0 += r * r / (sd * sd * sd) - 1.0 / sd;
    } else {
      std::vector<double> m0(m_), dm(m_), ds(m_);
      bin_masses(grid_, g.cp.mu0, g.cp.sigma0, m0.data(), dm.data(), ds.data());
      double D = 0.0;
      for (int k = 0; k < m_; ++k) D += m0[k] * v[k];
      if (D > 0.0) {
        for (int k = 0; k < m_; ++k) {
          g.g_mu0 += v[k] * dm[k] / D;
          g.g_sigma0 += v[k] * ds[k] / D;
        }
      }
    }
    return ll;
  }

  Eigen::VectorXd finish_gradient(const Eigen::Ref<const Eigen::VectorXd>& theta, Workspace& g) const {
    // Shared tails: propagate adjoints forward in time.
    for (int t = 1; t < T_; ++t) {
      for (int age = 0; age <= cap_; ++age) {
        const int key = tail_key(t, age);
        if (!g.has_tail_adj[key]) continue;
        const Eigen::VectorXd A = g.tail_adj[key];
        const int next_age = std::min(age + 1, cap_);
        const int s_cls = spec_.age_map.class_of(age);
        const int p_cls = spec_.age_map.class_of(age + 1);
        const Emit e = emit_for(g, 0, t + 1, p_cls);
        const Eigen::VectorXd& v = tail(t + 1, next_age, g);
        Eigen::VectorXd b, qv;
        bwd_dd(v, g.phi_mid[cls_t(s_cls, t)], g.Q[p_cls], e, b, qv);
        adj_dd(g, A, v, qv, s_cls, p_cls, t, 0, e, 1.0);
        if (t + 1 < T_) {
          Eigen::VectorXd fwd;
          fwd_dd(A, g.phi_mid[cls_t(s_cls, t)], g.Q[p_cls], e, fwd);
          const int nkey = tail_key(t + 1, next_age);
          if (!g.has_tail_adj[nkey]) {
            g.tail_adj[nkey] = Eigen::VectorXd::Zero(m_ + 2);
            g.has_tail_adj[nkey] = 1;
          }
          g.tail_adj[nkey] += fwd;
        }
      }
    }

    Eigen::VectorXd grad = g.g_theta;
    // Bin-to-bin transition masses.
    std::vector<double> mass(m_), dm(m_), ds(m_);
    for (int a = 0; a < ncls_; ++a) {
      const auto& U = g.gq_u[a];
      if (U.empty()) continue;
      const Eigen::Index cols = static_cast<Eigen::Index>(U.size()) / m_;
      const Eigen::Map<const Eigen::MatrixXd> Um(U.data(), m_, cols);
      const Eigen::Map<const Eigen::MatrixXd> Vm(g.gq_v[a].data(), m_, cols);
      const Eigen::MatrixXd GQ = Um * Vm.transpose();
      for (int j = 0; j < m_; ++j) {
        const double x = grid_.midpoints[j];
        bin_masses(grid_, x + g.cp.eta[a] * (g.cp.mu[a] - x), g.cp.sigma[a], mass.data(), dm.data(), ds.data());
        double dmean = 0.0;
        double dsig = 0.0;
        for (int k = 0; k < m_; ++k) {
          dmean += GQ(j, k) * dm[k];
          dsig += GQ(j, k) * ds[k];
        }
        g.g_sigma[a] += dsig;
        g.g_mu[a] += dmean * g.cp.eta[a];
        g.g_eta[a] += dmean * (g.cp.mu[a] - x);
      }
    }
    // Survival at bin midpoints.
    for (int a = 0; a < ncls_; ++a) {
      const int bi = spec_.block_index(Role::survival, a);
      for (int t = 1; t < T_; ++t) {
        const Eigen::VectorXd& gp = g.g_phi_mid[cls_t(a, t)];
        for (int j = 0; j < m_; ++j) {
          if (gp[j] != 0.0) add_probability_gradient(spec_, bi, theta, t, grid_.midpoints[j], gp[j], grad);
        }
      }
    }
    // Recapture / recovery.
    for (int a = 0; a < ncls_; ++a) {
      const int bp = spec_.block_index(Role::recapture, a);
      const int bl = spec_.block_index(Role::recovery, a);
      for (int t = 2; t <= T_; ++t) {
        add_probability_gradient(spec_, bp, theta, t, 0.0, g.g_p[cls_e(a, t)], grad);
        add_probability_gradient(spec_, bl, theta, t, 0.0, g.g_lam[cls_e(a, t)], grad);
      }
    }
    // Covariate process.
    const auto add_cp = [&](Role role, int cls, double adj, double natural) {
      const int bi = spec_.block_index(role, cls);
      grad[spec_.offsets[bi]] += adj * covproc_jacobian(role, natural);
    };
    add_cp(Role::covproc_mu0, 0, g.g_mu0, g.cp.mu0);
    add_cp(Role::covproc_sigma0, 0, g.g_sigma0, g.cp.sigma0);
    for (int a = 0; a < ncls_; ++a) {
      add_cp(Role::covproc_mu, a, g.g_mu[a], g.cp.mu[a]);
      add_cp(Role::covproc_sigma, a, g.g_sigma[a], g.cp.sigma[a]);
      add_cp(Role::covproc_eta, a, g.g_eta[a], g.cp.eta[a]);
    }
    return grad;
  }

  const ModelSpec& spec_;
  CovGrid grid_;
  int T_, m_, ncls_, cap_;
  std::vector<Individual> inds_;
  std::vector<int> ages_first_;
  mutable double last_tail_mass_ = 0.0;
};

/// Sum of per-history forward-algorithm log-likelihoods (pairwise summation).
inline double loglik_dataset(const std::vector<EncounterHistory>& histories, const CovGrid& grid,
                             const ModelSpec& spec, const PackedParams& packed) {
  if (histories.empty()) return 0.0;
  ModelSpec local = spec;
  local.hmm_bins = grid.m;
  local.hmm_grid = std::array<double, 2>{grid.lo, grid.hi};
  HistoryData data{spec.T, histories};
  const HmmLikelihood lik(local, data);
  return lik.evaluate(packed.theta);
}

}  // namespace semicjs
