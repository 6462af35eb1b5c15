#pragma once

// Cubic B-spline bases on equidistant knots and the difference penalty used
// for P-spline predictors.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include <Eigen/Core>

#include "semicjs/error.hpp"

namespace semicjs {

struct SplineBasis {
  static constexpr int degree = 3;
  int K = 0;
  double domain_lo = 0.0;
  double domain_hi = 1.0;
  std::vector<double> knots;

  double spacing() const { return knots[1] - knots[0]; }

  /// Knot averages; sum_k greville(k) * B_k(w) == w on the domain.
  double greville(int k) const {
    return (knots[k + 1] + knots[k + 2] + knots[k + 3]) / 3.0;
  }
};

/// K cubic B-splines whose full-support interval is exactly [lo, hi].
/// Interior spacing (hi - lo) / (K - 3); three extra knots on each side.
inline SplineBasis build_basis(int K, double domain_lo, double domain_hi) {
  if (K < SplineBasis::degree + 1) {
    throw InvalidArgument("build_basis: K must be >= 4, got " + std::to_string(K));
  }
  if (!std::isfinite(domain_lo) || !std::isfinite(domain_hi) || !(domain_lo < domain_hi)) {
    throw InvalidArgument("build_basis: degenerate domain");
  }
  SplineBasis b;
  b.K = K;
  b.domain_lo = domain_lo;
  b.domain_hi = domain_hi;
  const double delta = (domain_hi - domain_lo) / (K - SplineBasis::degree);
  const int n_knots = K + SplineBasis::degree + 1;
  b.knots.resize(n_knots);
  for (int i = 0; i < n_knots; ++i) {
    b.knots[i] = domain_lo + (i - SplineBasis::degree) * delta;
  }
  b.knots[SplineBasis::degree] = domain_lo;
  b.knots[K] = domain_hi;
  return b;
}

/// The (at most) four nonzero basis values at w: B_first .. B_{first+3}.
struct BasisRow {
  int first = 0;
  std::array<double, 4> values{};
};

inline BasisRow eval_basis_local(const SplineBasis& basis, double w) {
  if (!std::isfinite(w)) {
    throw InvalidArgument("eval_basis: non-finite covariate value");
  }
  w = std::clamp(w, basis.domain_lo, basis.domain_hi);
  const double delta = basis.spacing();
  // span index i with knots[i] <= w < knots[i+1], restricted to [3, K-1]
  int span = SplineBasis::degree +
             static_cast<int>(std::floor((w - basis.domain_lo) / delta));
  span = std::clamp(span, SplineBasis::degree, basis.K - 1);
  double u = (w - basis.knots[span]) / delta;
  u = std::clamp(u, 0.0, 1.0);
  const double u2 = u * u;
  const double u3 = u2 * u;
  const double v = 1.0 - u;
  BasisRow row;
  row.first = span - SplineBasis::degree;
  row.values[0] = v * v * v / 6.0;
  row.values[1] = (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0;
  row.values[2] = (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0;
  row.values[3] = u3 / 6.0;
  return row;
}

inline Eigen::VectorXd eval_basis(const SplineBasis& basis, double w) {
  const BasisRow row = eval_basis_local(basis, w);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(basis.K);
  for (int i = 0; i < 4; ++i) out[row.first + i] = row.values[i];
  return out;
}

struct SplineSmooth {
  SplineBasis basis;
  Eigen::VectorXd gamma;
  double h = 0.0;
  int diff_order = 2;
};

inline void validate(const SplineSmooth& s) {
  if (s.gamma.size() != s.basis.K) {
    throw InvalidArgument("SplineSmooth: gamma length differs from K");
  }
  if (!(s.h >= 0.0)) throw InvalidArgument("SplineSmooth: h must be >= 0");
  if (s.diff_order < 1 || s.diff_order > 3 || s.diff_order >= s.basis.K) {
    throw InvalidArgument("SplineSmooth: diff_order must be in {1,2,3} and < K");
  }
}

/// Link-scale predictor sum_k gamma_k B_k(w).
template <typename Coefs>
double predictor(const SplineBasis& basis, const Coefs& gamma, double w) {
  const BasisRow row = eval_basis_local(basis, w);
  double eta = 0.0;
  for (int i = 0; i < 4; ++i) eta += gamma[row.first + i] * row.values[i];
  return eta;
}

inline double predictor(const SplineSmooth& smooth, double w) {
  return predictor(smooth.basis, smooth.gamma, w);
}

/// (K - order) x K difference operator.
inline Eigen::MatrixXd difference_matrix(int K, int order) {
  Eigen::MatrixXd d = Eigen::MatrixXd::Identity(K, K);
  for (int o = 0; o < order; ++o) {
    const Eigen::Index rows = d.rows() - 1;
    d = (d.bottomRows(rows) - d.topRows(rows)).eval();
  }
  return d;
}

struct PenaltyVector {
  std::vector<SplineSmooth> smooths;

  Eigen::VectorXd h_vec() const {
    Eigen::VectorXd h(static_cast<Eigen::Index>(smooths.size()));
    for (std::size_t j = 0; j < smooths.size(); ++j) h[j] = smooths[j].h;
    return h;
  }
};

inline double penalty(const PenaltyVector& pv) {
  double total = 0.0;
  for (const auto& s : pv.smooths) {
    validate(s);
    if (s.h == 0.0) continue;
    Eigen::VectorXd diff = s.gamma;
    for (int o = 0; o < s.diff_order; ++o) {
      const Eigen::Index n = diff.size() - 1;
      diff = (diff.tail(n) - diff.head(n)).eval();
    }
    total += 0.5 * s.h * diff.squaredNorm();
  }
  return total;
}

/// Block-diagonal h_j D_j^T D_j; penalty(pv) == 0.5 * gamma^T H gamma.
inline Eigen::MatrixXd penalty_hessian(const PenaltyVector& pv) {
  Eigen::Index n = 0;
  for (const auto& s : pv.smooths) n += s.basis.K;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  Eigen::Index off = 0;
  for (const auto& s : pv.smooths) {
    validate(s);
    const Eigen::MatrixXd d = difference_matrix(s.basis.K, s.diff_order);
    out.block(off, off, s.basis.K, s.basis.K) = s.h * d.transpose() * d;
    off += s.basis.K;
  }
  return out;
}

}  // namespace semicjs
