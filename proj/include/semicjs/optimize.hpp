#pragma once

// Damped BFGS for objectives of the form f(x) + x'Sx/2 where the quadratic
// penalty S is known exactly. Only the curvature of f is learned from
// gradient differences; S enters the Newton system as is.

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

namespace semicjs {

/// Returns f(x) and fills grad (same size as x) when grad is non-null.
/// Non-finite values mark infeasible points.
using GradObjective = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>;

struct OptimOptions {
  int max_iter = 1000;
  double tol = 1e-6;
  int max_backtracks = 50;
};

struct OptimResult {
  Eigen::VectorXd x;
  double value = std::numeric_limits<double>::infinity();  // f + penalty
  Eigen::VectorXd grad;                                     // of f + penalty
  double grad_norm = std::numeric_limits<double>::infinity();
  bool converged = false;
  int iterations = 0;
  std::string message;
};

/// B0, if non-empty, is the initial curvature estimate of f.
inline OptimResult minimize_bfgs(const GradObjective& f, const Eigen::MatrixXd& S, Eigen::VectorXd x,
                                 const OptimOptions& opt = {}, const Eigen::MatrixXd& B0 = {}) {
  const Eigen::Index n = x.size();
  OptimResult res;
  const auto total = [&](const Eigen::VectorXd& z, Eigen::VectorXd* g) {
    Eigen::VectorXd gf;
    const double v = f(z, g ? &gf : nullptr);
    if (!std::isfinite(v)) return std::numeric_limits<double>::infinity();
    if (g) *g = gf + S * z;
    return v + 0.5 * z.dot(S * z);
  };
  Eigen::VectorXd g;
  double fx = total(x, &g);
  res.x = x;
  res.value = fx;
  if (!std::isfinite(fx)) {
    res.message = "objective not finite at start";
    return res;
  }
  const auto converged_at = [&](const Eigen::VectorXd& grad, double val) {
    return n == 0 || grad.cwiseAbs().maxCoeff() < opt.tol * (1.0 + std::abs(val));
  };
  Eigen::MatrixXd B = Eigen::MatrixXd::Identity(n, n);
  bool scaled = false;
  if (B0.rows() == n && B0.cols() == n && B0.allFinite()) {
    B = 0.5 * (B0 + B0.transpose());
    scaled = true;
  }
  int it = 0;
  for (; it < opt.max_iter; ++it) {
    if (converged_at(g, fx)) {
      res.converged = true;
      break;
    }
    Eigen::VectorXd d;
    Eigen::LLT<Eigen::MatrixXd> llt(B + S);
    if (llt.info() == Eigen::Success) d = -llt.solve(g);
    if (d.size() != n || !d.allFinite() || d.dot(g) >= 0.0) {
      B = Eigen::MatrixXd::Identity(n, n) * std::max(1.0, B.diagonal().cwiseAbs().maxCoeff());
      d = -(B + S).llt().solve(g);
    }
    double step = 1.0;
    Eigen::VectorXd xn, gn;
    double fn = std::numeric_limits<double>::infinity();
    const double slope = g.dot(d);
    bool accepted = false;
    for (int k = 0; k < opt.max_backtracks; ++k) {
      xn = x + step * d;
      fn = total(xn, &gn);
      if (std::isfinite(fn) && fn <= fx + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (converged_at(g, fx)) res.converged = true;
      res.message = "line search failed";
      break;
    }
    const Eigen::VectorXd s = xn - x;
    // curvature of f alone: remove the exact penalty part
    const Eigen::VectorXd y = (gn - g) - S * s;
    const double sy = s.dot(y);
    if (!scaled && sy > 0.0) {
      B *= y.squaredNorm() / sy;
      scaled = true;
    }
    const Eigen::VectorXd Bs = B * s;
    const double sBs = s.dot(Bs);
    if (sBs > 0.0) {
      double theta = 1.0;
      if (sy < 0.2 * sBs) theta = 0.8 * sBs / (sBs - sy);
      const Eigen::VectorXd r = theta * y + (1.0 - theta) * Bs;
      const double sr = s.dot(r);
      if (sr > 0.0) {
        B += r * r.transpose() / sr - Bs * Bs.transpose() / sBs;
        B = 0.5 * (B + B.transpose());
      }
    }
    const double fprev = fx;
    x = xn;
    g = gn;
    fx = fn;
    if (std::abs(fprev - fx) <= 1e-15 * (1.0 + std::abs(fx)) && s.cwiseAbs().maxCoeff() < 1e-12) {
      res.converged = converged_at(g, fx);
      res.message = "no progress";
      break;
    }
  }
  if (it == opt.max_iter) res.message = "iteration limit";
  if (!res.converged && converged_at(g, fx)) res.converged = true;
  res.x = x;
  res.value = fx;
  res.grad = g;
  res.grad_norm = n == 0 ? 0.0 : g.cwiseAbs().maxCoeff();
  res.iterations = it;
  return res;
}

}  // namespace semicjs
