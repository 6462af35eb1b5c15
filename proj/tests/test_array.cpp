#include <cmath>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "semicjs/lik_array.hpp"

using namespace semicjs;

namespace {

RateSeries random_rates(int T, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  RateSeries r(T);
  for (int t = 0; t < T; ++t) {
    r.phi[t] = u(rng);
    r.p[t] = u(rng);
    r.lambda[t] = u(rng);
  }
  return r;
}

// Probability of a history by enumerating the hidden death time.
double fate_probability(const std::vector<int>& codes, const RateSeries& r) {
  const int T = static_cast<int>(codes.size());
  int c = 0;
  while (codes[c] != 1) ++c;
  const int first = c + 1;
  double total = 0.0;
  // death occasion d: alive through d-1, dies in (d-1, d]; d = T+1 means alive at T
  for (int d = first + 1; d <= T + 1; ++d) {
    double pr = 1.0;
    for (int t = first; t < d - 1; ++t) pr *= r.phi[t - 1];
    for (int t = first + 1; t <= std::min(d - 1, T); ++t) {
      pr *= codes[t - 1] == 1 ? r.p[t - 1] : (codes[t - 1] == 0 ? 1.0 - r.p[t - 1] : 0.0);
    }
    if (d <= T) {
      pr *= 1.0 - r.phi[d - 2];
      pr *= codes[d - 1] == 2 ? r.lambda[d - 1] : (codes[d - 1] == 0 ? 1.0 - r.lambda[d - 1] : 0.0);
      for (int t = d + 1; t <= T; ++t) {
        if (codes[t - 1] != 0) pr = 0.0;
      }
    }
    total += pr;
  }
  return total;
}

std::vector<std::vector<int>> all_histories(int T) {
  std::vector<std::vector<int>> out;
  std::vector<int> h(T, 0);
  std::function<void(int)> rec = [&](int t) {
    if (t == T) {
      int c = -1;
      for (int i = 0; i < T; ++i) {
        if (h[i] == 1) {
          c = i;
          break;
        }
      }
      if (c < 0) return;
      for (int i = 0; i < c; ++i) {
        if (h[i] != 0) return;
      }
      int dead = 0;
      for (int i = c; i < T; ++i) {
        if (dead && h[i] != 0) return;
        if (h[i] == 2) dead = 1;
      }
      out.push_back(h);
      return;
    }
    for (int v = 0; v < 3; ++v) {
      h[t] = v;
      rec(t + 1);
    }
  };
  rec(0);
  return out;
}

EncounterHistory make(const std::vector<int>& codes) {
  return testutil::history(codes, std::vector<std::optional<double>>(codes.size()));
}

}  // namespace

TEST(Array, ChiHandValues) {
  RateSeries r(3);
  r.phi = {0.5, 0.5, 0.0};
  r.p = {0.0, 0.5, 0.5};
  r.lambda = {0.0, 0.5, 0.5};
  const auto c = chi(r, 3);
  EXPECT_DOUBLE_EQ(c[2], 1.0);
  EXPECT_NEAR(c[1], 0.5, 1e-15);
  EXPECT_NEAR(c[0], 0.375, 1e-15);
}

TEST(Array, ChiLastIsOne) {
  for (unsigned s = 0; s < 10; ++s) EXPECT_EQ(chi(random_rates(7, s), 7).back(), 1.0);
}

TEST(Array, CellProbabilitiesHandValues) {
  RateSeries r(3);
  r.phi = {0.5, 0.5, 0.5};
  r.p = {0.5, 0.5, 0.5};
  r.lambda = {0.5, 0.5, 0.5};
  const CellProbs q = cell_probs(r, 3);
  EXPECT_NEAR(q.q_m(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(q.q_m(0, 1), 0.0625, 1e-15);
  EXPECT_NEAR(q.q_m(0, 2), 0.375, 1e-15);
  EXPECT_NEAR(q.q_d(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(q.q_d(0, 1), 0.0625, 1e-15);
  EXPECT_NEAR(q.q_m.row(0).sum() + q.q_d.row(0).sum(), 1.0, 1e-15);
}

TEST(Array, FirstCellIsSurvivalTimesCapture) {
  const RateSeries r = random_rates(8, 1);
  const CellProbs q = cell_probs(r, 8);
  for (int row = 1; row < 8; ++row) EXPECT_NEAR(q.q_m(row - 1, row - 1), r.phi[row - 1] * r.p[row], 1e-15);
}

TEST(Array, RowsSumToOne) {
  for (unsigned s = 0; s < 200; ++s) {
    const int T = 2 + static_cast<int>(s % 30);
    const CellProbs q = cell_probs(random_rates(T, s), T);
    for (int row = 0; row < T - 1; ++row) EXPECT_LT(std::abs(q.q_m.row(row).sum() + q.q_d.row(row).sum() - 1.0), 1e-12);
  }
}

TEST(Array, ChiDecreasesWithRecovery) {
  RateSeries r = random_rates(6, 3);
  const auto before = chi(r, 6);
  r.lambda[3] = std::min(1.0, r.lambda[3] + 0.2);
  const auto after = chi(r, 6);
  for (int i = 0; i < 6; ++i) EXPECT_LE(after[i], before[i] + 1e-15);
  EXPECT_LT(after[2], before[2]);
}

TEST(Array, SingleCellLikelihood) {
  MDArrays a = MDArrays::zeros(3);
  a.m(1, 2) = 1;
  a.releases[0] = 1;
  RateSeries r(3);
  r.phi = {0.5, 0.3, 0.0};
  r.p = {0.0, 0.5, 0.2};
  r.lambda = {0.0, 0.1, 0.1};
  EXPECT_NEAR(loglik_array(a, r), std::log(0.25), 1e-15);
}

TEST(Array, ExpectedCountsMaximizedAtTruth) {
  const int T = 6;
  RateSeries truth(T);
  for (int t = 0; t < T; ++t) {
    truth.phi[t] = 0.7;
    truth.p[t] = 0.4;
    truth.lambda[t] = 0.3;
  }
  const CellProbs q = cell_probs(truth, T);
  MDArrays a = MDArrays::zeros(T);
  a.m_counts = 1000.0 * q.q_m;
  a.d_counts = 1000.0 * q.q_d;
  a.releases.setConstant(1000.0);
  double best = -INFINITY, arg = 0.0;
  for (double phi = 0.5; phi <= 0.9 + 1e-12; phi += 0.001) {
    RateSeries r = truth;
    for (int t = 0; t < T; ++t) r.phi[t] = phi;
    const double ll = loglik_array(a, r);
    if (ll > best) {
      best = ll;
      arg = phi;
    }
  }
  EXPECT_NEAR(arg, 0.7, 1e-9);
}

TEST(Array, RecoveredAtSecondOccasion) {
  RateSeries r(2);
  r.phi = {0.5, 0.0};
  r.p = {0.0, 0.9};
  r.lambda = {0.0, 0.5};
  EXPECT_NEAR(loglik_history(make({1, 2}), r), std::log(0.25), 1e-15);
}

TEST(Array, HistoriesSumToOne) {
  for (unsigned s = 0; s < 20; ++s) {
    for (int T : {3, 4, 5}) {
      const RateSeries r = random_rates(T, s);
      // condition on first capture at each occasion
      std::vector<double> total(T, 0.0);
      for (const auto& h : all_histories(T)) {
        int c = 0;
        while (h[c] != 1) ++c;
        const double lp = loglik_history(make(h), r);
        total[c] += std::exp(lp);
        EXPECT_NEAR(std::exp(lp), fate_probability(h, r), 1e-13);
      }
      for (int c = 0; c < T; ++c) EXPECT_NEAR(total[c], 1.0, 1e-12) << "T=" << T << " c=" << c + 1;
    }
  }
}

TEST(Array, AggregationMatchesHistories) {
  const int T = 8;
  const RateSeries r = random_rates(T, 17);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u;
  std::vector<EncounterHistory> hs;
  for (int i = 0; i < 500; ++i) {
    const int c = 1 + static_cast<int>(u(rng) * (T - 1));
    std::vector<int> codes(T, 0);
    codes[c - 1] = 1;
    bool alive = true;
    for (int t = c; t < T && alive; ++t) {
      if (u(rng) < r.phi[t - 1]) {
        if (u(rng) < r.p[t]) codes[t] = 1;
      } else {
        alive = false;
        if (u(rng) < r.lambda[t]) codes[t] = 2;
      }
    }
    hs.push_back(make(codes));
  }
  double sum = 0.0;
  for (const auto& h : hs) sum += loglik_history(h, r);
  const MDArrays a = build_arrays(hs, T);
  EXPECT_NO_THROW(validate(a));
  EXPECT_NEAR(sum, loglik_array(a, r), 1e-10 * std::abs(sum));
  std::vector<EncounterHistory> rev(hs.rbegin(), hs.rend());
  EXPECT_EQ(loglik_array(build_arrays(rev, T), r), loglik_array(a, r));
}

TEST(Array, RecoveryOnlyData) {
  // p = 0 everywhere: the live-resighting cells carry zero probability
  const int T = 5;
  RateSeries r = random_rates(T, 8);
  for (double& p : r.p) p = 0.0;
  const CellProbs q = cell_probs(r, T);
  for (int row = 0; row < T - 1; ++row) {
    for (int s = 0; s < T - 1; ++s) EXPECT_EQ(q.q_m(row, s), 0.0);
    EXPECT_NEAR(q.q_m(row, T - 1) + q.q_d.row(row).sum(), 1.0, 1e-14);
  }
}

TEST(Array, ArrayValidation) {
  MDArrays a = MDArrays::zeros(4);
  a.m(2, 2) = 1;  // below the diagonal
  a.releases[1] = 1;
  EXPECT_THROW(validate(a), InvalidArgument);
  MDArrays b = MDArrays::zeros(4);
  b.m(1, 3) = 2;
  b.releases[0] = 3;
  EXPECT_THROW(validate(b), InvalidArgument);
  RateSeries r(4);
  r.phi[0] = 1.5;
  EXPECT_THROW(chi(r, 4), InvalidArgument);
}

TEST(Array, ModelCohortsUseAgeSinceRelease) {
  ModelSpec s;
  s.T = 5;
  s.age_map.boundaries = {1};
  s.blocks = {testutil::blk(Role::survival, Form::constant, 0), testutil::blk(Role::survival, Form::constant, 1),
              testutil::blk(Role::recapture, Form::constant), testutil::blk(Role::recovery, Form::constant)};
  s.finalize();
  const Eigen::Vector4d th(logit(0.3), logit(0.8), logit(0.5), logit(0.2));
  const RateSeries r = cohort_rates(s, th, {}, 2);
  EXPECT_NEAR(r.phi[1], 0.3, 1e-14);
  EXPECT_NEAR(r.phi[2], 0.8, 1e-14);
  EXPECT_NEAR(r.phi[3], 0.8, 1e-14);
}
