#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

namespace semicjs {

/// Pairwise (cascade) summation; result depends only on the order of `values`.
inline double pairwise_sum(std::span<const double> values) {
  const std::size_t n = values.size();
  if (n <= 8) {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(values.subspan(0, half)) + pairwise_sum(values.subspan(half));
}

inline double normal_pdf(double z) {
  return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// Density of N(mean, sd^2) at x.
inline double normal_density(double x, double mean, double sd) {
  return normal_pdf((x - mean) / sd) / sd;
}

/// Quantile with linear interpolation between order statistics (R type 7).
inline double quantile_sorted(std::span<const double> sorted, double prob) {
  const std::size_t n = sorted.size();
  if (n == 0) return std::nan("");
  if (n == 1) return sorted[0];
  const double pos = prob * static_cast<double>(n - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, n - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace semicjs
