#pragma once

// Encounter histories and m-/d-array sufficient statistics.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "semicjs/error.hpp"

namespace semicjs {

/// One individual's record. codes[t-1] is the observation at occasion t:
/// 0 unobserved, 1 seen alive, 2 recovered dead in (t-1, t].
struct EncounterHistory {
  std::string id;
  std::vector<int> codes;
  std::vector<std::optional<double>> covariates;
  int age_at_first = 0;

  int T() const { return static_cast<int>(codes.size()); }

  int first_capture() const {
    for (int t = 1; t <= T(); ++t) {
      if (codes[t - 1] == 1) return t;
    }
    return 0;
  }

  /// Occasion of the dead recovery, or 0.
  int recovery_occasion() const {
    for (int t = 1; t <= T(); ++t) {
      if (codes[t - 1] == 2) return t;
    }
    return 0;
  }

  bool recovered() const { return recovery_occasion() > 0; }

  /// Last occasion known alive: last sighting, or the occasion before a recovery.
  int last_alive() const {
    const int rec = recovery_occasion();
    if (rec > 0) return rec - 1;
    int l = 0;
    for (int t = 1; t <= T(); ++t) {
      if (codes[t - 1] == 1) l = t;
    }
    return l;
  }

  /// Last occasion with a nonzero code.
  int last_event() const {
    int l = 0;
    for (int t = 1; t <= T(); ++t) {
      if (codes[t - 1] != 0) l = t;
    }
    return l;
  }

  int age_at(int t) const { return age_at_first + (t - first_capture()); }

  std::optional<double> covariate(int t) const { return covariates[t - 1]; }
};

inline void validate(const EncounterHistory& h, int T, bool covariate_at_first = false) {
  const std::string who = "history '" + h.id + "': ";
  if (h.T() != T) throw InvalidArgument(who + "expected " + std::to_string(T) + " occasions");
  if (static_cast<int>(h.covariates.size()) != T) {
    throw InvalidArgument(who + "covariate record length differs from T");
  }
  const int c = h.first_capture();
  if (c == 0) throw InvalidArgument(who + "never captured alive");
  for (int t = 1; t < c; ++t) {
    if (h.codes[t - 1] != 0) throw InvalidArgument(who + "event before first capture");
  }
  int recovered_at = 0;
  for (int t = c; t <= T; ++t) {
    const int code = h.codes[t - 1];
    if (code < 0 || code > 2) throw InvalidArgument(who + "codes must be 0, 1 or 2");
    if (recovered_at > 0 && code != 0) throw InvalidArgument(who + "event after dead recovery");
    if (code == 2) recovered_at = t;
    if (h.covariates[t - 1] && code != 1) {
      throw InvalidArgument(who + "covariate recorded without a live capture at occasion " +
                            std::to_string(t));
    }
  }
  if (h.age_at_first < 0) throw InvalidArgument(who + "negative age");
  if (covariate_at_first && !h.covariates[c - 1]) {
    throw InvalidArgument(who + "covariate missing at first capture");
  }
}

/// m_{rs}: released at r, next seen alive at s (s = T+1: never seen again).
/// d_{rs}: released at r, recovered dead in (s-1, s].
struct MDArrays {
  int T = 0;
  Eigen::MatrixXd m_counts;  // (T-1) x T, column s-2 for s = 2..T+1
  Eigen::MatrixXd d_counts;  // (T-1) x (T-1), column s-2 for s = 2..T
  Eigen::VectorXd releases;  // length T-1

  static MDArrays zeros(int T) {
    MDArrays a;
    a.T = T;
    a.m_counts = Eigen::MatrixXd::Zero(T - 1, T);
    a.d_counts = Eigen::MatrixXd::Zero(T - 1, T - 1);
    a.releases = Eigen::VectorXd::Zero(T - 1);
    return a;
  }

  double& m(int r, int s) { return m_counts(r - 1, s - 2); }
  double m(int r, int s) const { return m_counts(r - 1, s - 2); }
  double& d(int r, int s) { return d_counts(r - 1, s - 2); }
  double d(int r, int s) const { return d_counts(r - 1, s - 2); }
  double never(int r) const { return m(r, T + 1); }
};

inline void validate(const MDArrays& a) {
  if (a.T < 2) throw InvalidArgument("MDArrays: T must be >= 2");
  if (a.m_counts.rows() != a.T - 1 || a.m_counts.cols() != a.T || a.d_counts.rows() != a.T - 1 ||
      a.d_counts.cols() != a.T - 1 || a.releases.size() != a.T - 1) {
    throw InvalidArgument("MDArrays: matrix shapes do not match T");
  }
  for (int r = 1; r < a.T; ++r) {
    double total = 0.0;
    for (int s = 2; s <= a.T + 1; ++s) {
      const double v = a.m(r, s);
      if (v < 0.0) throw InvalidArgument("MDArrays: negative count");
      if (s <= r && v != 0.0) throw InvalidArgument("MDArrays: nonzero m-array entry below diagonal");
      total += v;
    }
    for (int s = 2; s <= a.T; ++s) {
      const double v = a.d(r, s);
      if (v < 0.0) throw InvalidArgument("MDArrays: negative count");
      if (s <= r && v != 0.0) throw InvalidArgument("MDArrays: nonzero d-array entry below diagonal");
      total += v;
    }
    if (std::abs(total - a.releases[r - 1]) > 1e-9 * (1.0 + total)) {
      throw InvalidArgument("MDArrays: row " + std::to_string(r) +
                            " counts do not sum to the release total");
    }
  }
}

/// Sufficient statistics of a set of histories (every live sighting before T is a release).
inline MDArrays build_arrays(const std::vector<EncounterHistory>& histories, int T) {
  MDArrays a = MDArrays::zeros(T);
  for (const auto& h : histories) {
    validate(h, T);
    int release = h.first_capture();
    for (int t = release + 1; t <= T && release < T; ++t) {
      const int code = h.codes[t - 1];
      if (code == 1) {
        a.m(release, t) += 1.0;
        a.releases[release - 1] += 1.0;
        release = t;
      } else if (code == 2) {
        a.d(release, t) += 1.0;
        a.releases[release - 1] += 1.0;
        release = T + 1;
        break;
      }
    }
    if (release < T) {
      a.m(release, T + 1) += 1.0;
      a.releases[release - 1] += 1.0;
    }
  }
  return a;
}

/// Global (occasion-indexed) covariate plus arrays.
struct ArrayData {
  MDArrays arrays;
  std::vector<double> covariate;  // length T (occasion t at index t-1); may be empty
};

struct HistoryData {
  int T = 0;
  std::vector<EncounterHistory> histories;
};

inline HistoryData subset(const HistoryData& data, const std::vector<int>& indices) {
  HistoryData out;
  out.T = data.T;
  out.histories.reserve(indices.size());
  for (int i : indices) out.histories.push_back(data.histories[i]);
  return out;
}

/// Indices of histories grouped by first-capture occasion (index t-1).
inline std::vector<std::vector<int>> strata_by_first_capture(const HistoryData& data) {
  std::vector<std::vector<int>> strata(data.T);
  for (int i = 0; i < static_cast<int>(data.histories.size()); ++i) {
    strata[data.histories[i].first_capture() - 1].push_back(i);
  }
  return strata;
}

}  // namespace semicjs
