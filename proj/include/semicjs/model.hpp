#pragma once

// Declarative model description, parameter packing and rate evaluation.
//
// Occasions are 1-based (t = 1..T) throughout the public API. Age classes are
// 0-based internally; the JSON layer exposes them 1-based.

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "semicjs/basis.hpp"
#include "semicjs/error.hpp"

namespace semicjs {

enum class Role {
  survival,
  recapture,
  recovery,
  covproc_mu0,
  covproc_sigma0,
  covproc_mu,
  covproc_sigma,
  covproc_eta,
};
inline constexpr int kNumRoles = 8;

enum class Form {
  fixed,
  constant,
  per_occasion,
  logistic_linear_in_covariate,
  logistic_linear_in_time,
  spline_in_covariate,
};

enum class Regime { array_global, history_constant, hmm_timevarying };

inline bool is_probability(Role r) {
  return r == Role::survival || r == Role::recapture || r == Role::recovery;
}

inline bool uses_covariate(Form f) {
  return f == Form::logistic_linear_in_covariate || f == Form::spline_in_covariate;
}

inline double link_inv(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

struct AgeClassMap {
  std::vector<int> boundaries;  // class k covers ages [boundaries[k-1], boundaries[k])

  int n_classes() const { return static_cast<int>(boundaries.size()) + 1; }

  int class_of(int age) const {
    int k = 0;
    while (k < static_cast<int>(boundaries.size()) && age >= boundaries[k]) ++k;
    return k;
  }

  /// Ages at or above this value all map to the last class.
  int age_cap() const { return boundaries.empty() ? 0 : boundaries.back(); }

  void validate() const {
    for (std::size_t i = 0; i < boundaries.size(); ++i) {
      if (boundaries[i] < 1 || (i > 0 && boundaries[i] <= boundaries[i - 1])) {
        throw InvalidArgument("AgeClassMap: boundaries must be strictly increasing and >= 1");
      }
    }
  }
};

struct ParamBlock {
  Role role = Role::survival;
  Form form = Form::constant;
  std::optional<int> age_class;  // nullopt: shared by every class
  double fixed_value = 0.0;      // Form::fixed only
  // spline_in_covariate only
  int K = 0;
  int diff_order = 2;
  std::optional<std::array<double, 2>> domain;  // nullopt until resolved from data
  int smooth_index = -1;
};

struct ModelSpec {
  int T = 0;
  Regime regime = Regime::array_global;
  AgeClassMap age_map;
  std::vector<ParamBlock> blocks;
  int hmm_bins = 0;
  std::optional<std::array<double, 2>> hmm_grid;

  // Derived by finalize().
  std::vector<SplineBasis> smooth_bases;
  std::vector<int> offsets;
  std::vector<int> dims;
  std::vector<int> smooth_blocks;  // block index of smooth j
  std::vector<int> lookup;         // [role * n_classes + class] -> block index or -1
  double time_mean[2] = {0.0, 0.0};  // [0] survival occasions, [1] recapture/recovery
  double time_sd[2] = {1.0, 1.0};

  int n_classes() const { return age_map.n_classes(); }
  int dim() const { return offsets.empty() ? 0 : offsets.back() + dims.back(); }
  int n_smooths() const { return static_cast<int>(smooth_blocks.size()); }
  bool resolved() const { return static_cast<int>(smooth_bases.size()) == n_smooths(); }

  int block_index(Role role, int age_class) const {
    return lookup[static_cast<int>(role) * n_classes() + age_class];
  }
  const ParamBlock& block(Role role, int age_class) const {
    const int b = block_index(role, age_class);
    if (b < 0) throw InvalidArgument("ModelSpec: no block for requested role/class");
    return blocks[b];
  }
  int block_dim(const ParamBlock& b) const;
  void finalize();
};

inline std::string to_string(Role r) {
  switch (r) {
    case Role::survival: return "survival";
    case Role::recapture: return "recapture";
    case Role::recovery: return "recovery";
    case Role::covproc_mu0: return "covproc_mu0";
    case Role::covproc_sigma0: return "covproc_sigma0";
    case Role::covproc_mu: return "covproc_mu";
    case Role::covproc_sigma: return "covproc_sigma";
    case Role::covproc_eta: return "covproc_eta";
  }
  return "?";
}

inline std::string to_string(Form f) {
  switch (f) {
    case Form::fixed: return "fixed";
    case Form::constant: return "constant";
    case Form::per_occasion: return "per_occasion";
    case Form::logistic_linear_in_covariate: return "logistic_linear_in_covariate";
    case Form::logistic_linear_in_time: return "logistic_linear_in_time";
    case Form::spline_in_covariate: return "spline_in_covariate";
  }
  return "?";
}

inline std::string to_string(Regime r) {
  switch (r) {
    case Regime::array_global: return "array_global";
    case Regime::history_constant: return "history_constant";
    case Regime::hmm_timevarying: return "hmm_timevarying";
  }
  return "?";
}

inline int ModelSpec::block_dim(const ParamBlock& b) const {
  switch (b.form) {
    case Form::fixed: return 0;
    case Form::constant: return 1;
    case Form::per_occasion: return T - 1;
    case Form::logistic_linear_in_covariate:
    case Form::logistic_linear_in_time: return 2;
    case Form::spline_in_covariate: return b.K;
  }
  return 0;
}

inline void ModelSpec::finalize() {
  if (T < 2) throw InvalidArgument("ModelSpec: T must be >= 2");
  age_map.validate();
  const int nc = n_classes();
  lookup.assign(kNumRoles * nc, -1);
  offsets.clear();
  dims.clear();
  smooth_blocks.clear();
  int off = 0;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    ParamBlock& b = blocks[i];
    const std::string where = "block " + std::to_string(i) + " (" + to_string(b.role) + ")";
    if (b.age_class && (*b.age_class < 0 || *b.age_class >= nc)) {
      throw InvalidArgument(where + ": age class out of range");
    }
    if (!is_probability(b.role) && b.form != Form::constant) {
      throw InvalidArgument(where + ": covariate-process parameters must be constant");
    }
    if ((b.role == Role::covproc_mu0 || b.role == Role::covproc_sigma0) && b.age_class) {
      throw InvalidArgument(where + ": initial-distribution parameters have no age class");
    }
    if (b.form == Form::fixed && !(b.fixed_value >= 0.0 && b.fixed_value <= 1.0)) {
      throw InvalidArgument(where + ": fixed probability must lie in [0,1]");
    }
    if (b.form == Form::logistic_linear_in_time && b.role == Role::survival && T < 3) {
      throw InvalidArgument(where + ": time trend needs at least 2 survival occasions");
    }
    if (b.form == Form::spline_in_covariate) {
      if (b.K < 4) throw InvalidArgument(where + ": spline needs K >= 4");
      if (b.diff_order < 1 || b.diff_order > 3 || b.diff_order >= b.K) {
        throw InvalidArgument(where + ": diff_order must be in {1,2,3} and < K");
      }
      b.smooth_index = static_cast<int>(smooth_blocks.size());
      smooth_blocks.push_back(static_cast<int>(i));
    }
    const int r = static_cast<int>(b.role);
    for (int c = 0; c < nc; ++c) {
      if (b.age_class && *b.age_class != c) continue;
      if (lookup[r * nc + c] >= 0) {
        throw InvalidArgument(where + ": duplicate block for age class " + std::to_string(c + 1));
      }
      lookup[r * nc + c] = static_cast<int>(i);
    }
    offsets.push_back(off);
    dims.push_back(block_dim(b));
    off += dims.back();
  }
  std::vector<Role> required = {Role::survival, Role::recapture, Role::recovery};
  if (regime == Regime::hmm_timevarying) {
    if (hmm_bins < 2) throw InvalidArgument("ModelSpec: hmm regime needs hmm_bins >= 2");
    for (Role r : {Role::covproc_mu0, Role::covproc_sigma0, Role::covproc_mu,
                   Role::covproc_sigma, Role::covproc_eta}) {
      required.push_back(r);
    }
    for (const auto& b : blocks) {
      if ((b.role == Role::recapture || b.role == Role::recovery) && uses_covariate(b.form)) {
        throw InvalidArgument(
            "ModelSpec: recapture/recovery cannot depend on the individual covariate in the "
            "hmm regime (dead or unobserved states carry no covariate)");
      }
    }
  }
  for (Role r : required) {
    for (int c = 0; c < nc; ++c) {
      if (lookup[static_cast<int>(r) * nc + c] < 0) {
        throw InvalidArgument("ModelSpec: missing " + to_string(r) + " block for age class " +
                              std::to_string(c + 1));
      }
    }
  }
  // Occasion standardization for time trends.
  for (int k = 0; k < 2; ++k) {
    const int first = k == 0 ? 1 : 2;
    const int last = k == 0 ? T - 1 : T;
    const int n = last - first + 1;
    double mean = 0.5 * (first + last);
    double var = 0.0;
    for (int t = first; t <= last; ++t) var += (t - mean) * (t - mean);
    var /= n;
    time_mean[k] = mean;
    time_sd[k] = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  // Build bases for smooths whose domain is known.
  smooth_bases.clear();
  bool all_known = true;
  for (int bi : smooth_blocks) all_known = all_known && blocks[bi].domain.has_value();
  if (all_known) {
    for (int bi : smooth_blocks) {
      const auto& d = *blocks[bi].domain;
      smooth_bases.push_back(build_basis(blocks[bi].K, d[0], d[1]));
    }
  }
}

struct PackedParams {
  Eigen::VectorXd theta;
  std::vector<int> offsets;
  std::vector<int> dims;
};

inline PackedParams make_packed(const ModelSpec& spec, Eigen::VectorXd theta) {
  if (theta.size() != spec.dim()) {
    throw InvalidArgument("PackedParams: theta length " + std::to_string(theta.size()) +
                          " does not match model dimension " + std::to_string(spec.dim()));
  }
  return PackedParams{std::move(theta), spec.offsets, spec.dims};
}

/// Natural-scale values, one vector per block.
using NaturalParams = std::vector<Eigen::VectorXd>;

namespace detail {

inline double to_theta(Role role, Form form, double x, const std::string& where) {
  switch (role) {
    case Role::survival:
    case Role::recapture:
    case Role::recovery:
      if (form == Form::constant || form == Form::per_occasion) {
        if (!(x > 0.0 && x < 1.0)) throw InvalidArgument(where + ": probability outside (0,1)");
        return logit(x);
      }
      if (!std::isfinite(x)) throw InvalidArgument(where + ": non-finite coefficient");
      return x;
    case Role::covproc_mu0:
    case Role::covproc_mu:
      if (!std::isfinite(x)) throw InvalidArgument(where + ": non-finite mean");
      return x;
    case Role::covproc_sigma0:
    case Role::covproc_sigma:
      if (!(x > 0.0) || !std::isfinite(x)) throw InvalidArgument(where + ": sigma must be > 0");
      return std::log(x);
    case Role::covproc_eta:
      if (!(x > 0.0 && x < 2.0)) throw InvalidArgument(where + ": eta outside (0,2)");
      return logit(0.5 * x);
  }
  return x;
}

inline double from_theta(Role role, Form form, double th) {
  switch (role) {
    case Role::survival:
    case Role::recapture:
    case Role::recovery:
      return (form == Form::constant || form == Form::per_occasion) ? link_inv(th) : th;
    case Role::covproc_mu0:
    case Role::covproc_mu: return th;
    case Role::covproc_sigma0:
    case Role::covproc_sigma: return std::exp(th);
    case Role::covproc_eta: return 2.0 * link_inv(th);
  }
  return th;
}

}  // namespace detail

inline PackedParams pack(const ModelSpec& spec, const NaturalParams& natural) {
  if (natural.size() != spec.blocks.size()) {
    throw InvalidArgument("pack: expected one natural vector per block");
  }
  Eigen::VectorXd theta(spec.dim());
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const auto& b = spec.blocks[i];
    const std::string where = "pack: block " + std::to_string(i) + " (" + to_string(b.role) + ")";
    if (natural[i].size() != spec.dims[i]) throw InvalidArgument(where + ": wrong length");
    for (int k = 0; k < spec.dims[i]; ++k) {
      theta[spec.offsets[i] + k] = detail::to_theta(b.role, b.form, natural[i][k], where);
    }
  }
  return make_packed(spec, std::move(theta));
}

inline NaturalParams unpack(const ModelSpec& spec, const PackedParams& packed) {
  if (packed.offsets != spec.offsets || packed.dims != spec.dims ||
      packed.theta.size() != spec.dim()) {
    throw InvalidArgument("unpack: layout does not match model spec");
  }
  NaturalParams out(spec.blocks.size());
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const auto& b = spec.blocks[i];
    out[i].resize(spec.dims[i]);
    for (int k = 0; k < spec.dims[i]; ++k) {
      out[i][k] = detail::from_theta(b.role, b.form, packed.theta[spec.offsets[i] + k]);
    }
  }
  return out;
}

/// Link-scale predictor of probability block `bi` at occasion t and covariate w.
inline double block_predictor(const ModelSpec& spec, int bi, const Eigen::Ref<const Eigen::VectorXd>& theta,
                              int t, double w) {
  const ParamBlock& b = spec.blocks[bi];
  const double* th = theta.data() + spec.offsets[bi];
  switch (b.form) {
    case Form::fixed: return 0.0;
    case Form::constant: return th[0];
    case Form::per_occasion: return th[b.role == Role::survival ? t - 1 : t - 2];
    case Form::logistic_linear_in_covariate: return th[0] + th[1] * w;
    case Form::logistic_linear_in_time: {
      const int k = b.role == Role::survival ? 0 : 1;
      return th[0] + th[1] * (t - spec.time_mean[k]) / spec.time_sd[k];
    }
    case Form::spline_in_covariate:
      return predictor(spec.smooth_bases[b.smooth_index], th, w);
  }
  return 0.0;
}

/// Calls f(theta_index, d predictor / d theta_index) for every nonzero coefficient.
template <typename F>
void for_each_predictor_coef(const ModelSpec& spec, int bi, int t, double w, F&& f) {
  const ParamBlock& b = spec.blocks[bi];
  const int off = spec.offsets[bi];
  switch (b.form) {
    case Form::fixed: return;
    case Form::constant: f(off, 1.0); return;
    case Form::per_occasion: f(off + (b.role == Role::survival ? t - 1 : t - 2), 1.0); return;
    case Form::logistic_linear_in_covariate:
      f(off, 1.0);
      f(off + 1, w);
      return;
    case Form::logistic_linear_in_time: {
      const int k = b.role == Role::survival ? 0 : 1;
      f(off, 1.0);
      f(off + 1, (t - spec.time_mean[k]) / spec.time_sd[k]);
      return;
    }
    case Form::spline_in_covariate: {
      const BasisRow row = eval_basis_local(spec.smooth_bases[b.smooth_index], w);
      for (int i = 0; i < 4; ++i) f(off + row.first + i, row.values[i]);
      return;
    }
  }
}

inline double block_probability(const ModelSpec& spec, int bi, const Eigen::Ref<const Eigen::VectorXd>& theta,
                                int t, double w) {
  const ParamBlock& b = spec.blocks[bi];
  if (b.form == Form::fixed) return b.fixed_value;
  return link_inv(block_predictor(spec, bi, theta, t, w));
}

/// Adds adjoint * d prob / d theta into grad.
inline void add_probability_gradient(const ModelSpec& spec, int bi,
                                     const Eigen::Ref<const Eigen::VectorXd>& theta, int t, double w,
                                     double adjoint, Eigen::Ref<Eigen::VectorXd> grad) {
  if (adjoint == 0.0 || spec.blocks[bi].form == Form::fixed) return;
  const double p = link_inv(block_predictor(spec, bi, theta, t, w));
  const double scale = adjoint * p * (1.0 - p);
  for_each_predictor_coef(spec, bi, t, w, [&](int idx, double c) { grad[idx] += scale * c; });
}

struct RateTriple {
  double phi = 0.0;
  double p = 0.0;
  double lambda = 0.0;
};

inline bool needs_covariate(const ModelSpec& spec, int age_class) {
  for (Role r : {Role::survival, Role::recapture, Role::recovery}) {
    if (uses_covariate(spec.block(r, age_class).form)) return true;
  }
  return false;
}

/// Survival from t to t+1, recapture at t and recovery at t for an individual in
/// `age_class` with covariate w.
inline RateTriple rates_at(const ModelSpec& spec, const PackedParams& packed, int t, int age_class,
                           std::optional<double> w) {
  if (t < 1 || t > spec.T) throw InvalidArgument("rates_at: occasion out of range");
  if (age_class < 0 || age_class >= spec.n_classes()) {
    throw InvalidArgument("rates_at: age class out of range");
  }
  if (!w && needs_covariate(spec, age_class)) {
    throw InvalidArgument("rates_at: covariate value required by a covariate-dependent block");
  }
  if (!spec.resolved()) throw InvalidArgument("rates_at: spline domains are unresolved");
  const double wv = w.value_or(0.0);
  const auto prob = [&](Role r, int tt) {
    return block_probability(spec, spec.block_index(r, age_class), packed.theta, tt, wv);
  };
  RateTriple out;
  out.phi = t < spec.T ? prob(Role::survival, t) : 0.0;
  out.p = t > 1 ? prob(Role::recapture, t) : 0.0;
  out.lambda = t > 1 ? prob(Role::recovery, t) : 0.0;
  return out;
}

struct CovProcess {
  double mu0 = 0.0;
  double sigma0 = 1.0;
  std::vector<double> mu, sigma, eta;  // per age class
};

inline CovProcess covariate_process(const ModelSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& theta) {
  CovProcess cp;
  const auto value = [&](Role r, int c) {
    const int bi = spec.block_index(r, c);
    return detail::from_theta(r, Form::constant, theta[spec.offsets[bi]]);
  };
  cp.mu0 = value(Role::covproc_mu0, 0);
  cp.sigma0 = value(Role::covproc_sigma0, 0);
  for (int c = 0; c < spec.n_classes(); ++c) {
    cp.mu.push_back(value(Role::covproc_mu, c));
    cp.sigma.push_back(value(Role::covproc_sigma, c));
    cp.eta.push_back(value(Role::covproc_eta, c));
  }
  return cp;
}

/// d natural / d theta for a covariate-process block (chain factor).
inline double covproc_jacobian(Role role, double natural) {
  switch (role) {
    case Role::covproc_sigma0:
    case Role::covproc_sigma: return natural;
    case Role::covproc_eta: return natural * (1.0 - 0.5 * natural);
    default: return 1.0;
  }
}

/// Penalty structure for the given smoothing vector, with gammas taken from theta.
inline PenaltyVector penalty_vector(const ModelSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& theta,
                                    const Eigen::Ref<const Eigen::VectorXd>& h_vec) {
  if (h_vec.size() != spec.n_smooths()) {
    throw InvalidArgument("penalty_vector: h_vec length " + std::to_string(h_vec.size()) +
                          " differs from number of smooths " + std::to_string(spec.n_smooths()));
  }
  PenaltyVector pv;
  for (int j = 0; j < spec.n_smooths(); ++j) {
    const int bi = spec.smooth_blocks[j];
    if (!(h_vec[j] >= 0.0)) throw InvalidArgument("penalty_vector: h must be >= 0");
    SplineSmooth s;
    s.basis = spec.smooth_bases[j];
    s.gamma = theta.segment(spec.offsets[bi], spec.blocks[bi].K);
    s.h = h_vec[j];
    s.diff_order = spec.blocks[bi].diff_order;
    pv.smooths.push_back(std::move(s));
  }
  return pv;
}

/// Full-dimension penalty Hessian (zero outside spline blocks).
inline Eigen::MatrixXd full_penalty_hessian(const ModelSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& h_vec) {
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(spec.dim(), spec.dim());
  if (h_vec.size() != spec.n_smooths()) {
    throw InvalidArgument("full_penalty_hessian: h_vec length mismatch");
  }
  for (int j = 0; j < spec.n_smooths(); ++j) {
    const int bi = spec.smooth_blocks[j];
    const int K = spec.blocks[bi].K;
    const Eigen::MatrixXd d = difference_matrix(K, spec.blocks[bi].diff_order);
    S.block(spec.offsets[bi], spec.offsets[bi], K, K) = h_vec[j] * d.transpose() * d;
  }
  return S;
}

/// Fitted curve of smooth j on the probability scale.
inline double smooth_curve(const ModelSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& theta, int j, double w) {
  const int bi = spec.smooth_blocks[j];
  return link_inv(predictor(spec.smooth_bases[j], theta.segment(spec.offsets[bi], spec.blocks[bi].K), w));
}

}  // namespace semicjs
