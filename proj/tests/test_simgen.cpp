#include <cmath>

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "semicjs/lik_hmm.hpp"
#include "semicjs/simgen.hpp"

using namespace semicjs;

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(Simgen, DefaultConfiguration) {
  const SimConfig c;
  EXPECT_EQ(c.N, 600);
  EXPECT_EQ(c.T, 10);
  EXPECT_EQ(c.p, 0.6);
  EXPECT_EQ(c.lambda, 0.4);
  EXPECT_EQ(c.mu0, -1.4);
  EXPECT_EQ(c.mu, (std::vector<double>{1.0, 1.3}));
  EXPECT_EQ(c.sigma0, 0.4);
  EXPECT_EQ(c.sigma, (std::vector<double>{0.5, 0.4}));
  EXPECT_EQ(c.eta, (std::vector<double>{0.5, 0.8}));
}

TEST(Simgen, TrueSurvivalFormulas) {
  EXPECT_NEAR(true_phi(1, 0.5), logistic(2.0), 1e-15);
  EXPECT_NEAR(true_phi(1, 3.0), logistic(2.0), 1e-15);
  EXPECT_NEAR(true_phi(1, 0.5 - 1e-12), logistic(2.0), 1e-12);
  EXPECT_NEAR(true_phi(1, -1.5), logistic(2.0 - 0.3 * 4.0), 1e-15);
  EXPECT_NEAR(true_phi(2, -0.8), logistic(std::sin(0.45) + 1.3 - 0.56), 1e-15);
  EXPECT_NEAR(true_phi(2, 1.0), logistic(std::sin(2.5 * 1.8 + 0.45) + 2.0), 1e-15);
  EXPECT_THROW(true_phi(3, 0.0), InvalidArgument);
}

TEST(Simgen, Deterministic) {
  SimConfig c;
  c.N = 50;
  const SimDataset a = simulate_dataset(c), b = simulate_dataset(c);
  for (int i = 0; i < 50; ++i) {
    EXPECT_EQ(a.data.histories[i].codes, b.data.histories[i].codes);
    EXPECT_EQ(a.data.histories[i].covariates, b.data.histories[i].covariates);
  }
}

TEST(Simgen, HistoriesAreValid) {
  SimConfig c;
  c.N = 500;
  const SimDataset ds = simulate_dataset(c);
  for (const auto& h : ds.data.histories) {
    EXPECT_NO_THROW(validate(h, c.T, true));
    EXPECT_LE(h.first_capture(), c.T - 1);
  }
}

TEST(Simgen, NoRecoveriesWithoutRecovery) {
  SimConfig c;
  c.N = 300;
  c.lambda = 1e-300;
  const SimDataset ds = simulate_dataset(c);
  for (const auto& h : ds.data.histories) EXPECT_FALSE(h.recovered());
}

TEST(Simgen, FullObservationRevealsTruth) {
  SimConfig c;
  c.N = 200;
  c.p = 1.0 - 1e-16;
  c.lambda = 1.0 - 1e-16;
  const SimDataset ds = simulate_dataset(c);
  for (std::size_t i = 0; i < ds.data.histories.size(); ++i) {
    const auto& h = ds.data.histories[i];
    for (int t = h.first_capture(); t <= c.T; ++t) {
      EXPECT_EQ(h.codes[t - 1] == 1, ds.truth.alive[i][t - 1] == 1);
      if (h.covariates[t - 1]) {
        EXPECT_EQ(*h.covariates[t - 1], ds.truth.covariate[i][t - 1]);
      }
    }
  }
}

TEST(Simgen, SurvivalFrequencyMatchesTruth) {
  SimConfig c;
  c.N = 50000;
  c.seed = 21;
  const SimDataset ds = simulate_dataset(c);
  // class-2 survival in the bin [1.0, 1.2)
  double n = 0, s = 0;
  for (std::size_t i = 0; i < ds.truth.alive.size(); ++i) {
    const int first = ds.data.histories[i].first_capture();
    for (int t = first; t < c.T; ++t) {
      if (!ds.truth.alive[i][t - 1] || t - first < c.age_boundary) continue;
      const double w = ds.truth.covariate[i][t - 1];
      if (w < 1.0 || w >= 1.2) continue;
      n += 1;
      s += ds.truth.alive[i][t];
    }
  }
  ASSERT_GT(n, 1000);
  const double p = true_phi(2, 1.1);
  EXPECT_NEAR(s / n, p, 3 * std::sqrt(p * (1 - p) / n));
}

TEST(Simgen, CovariateMeanReversion) {
  // long paths of the recursion settle around mu
  std::mt19937_64 rng(4);
  std::normal_distribution<double> z;
  const SimConfig c;
  for (int a = 0; a < 2; ++a) {
    double w = c.mu0, acc = 0.0;
    const int n = 100000;
    for (int k = 0; k < n; ++k) {
      w = w + c.eta[a] * (c.mu[a] - w) + c.sigma[a] * z(rng);
      acc += w;
    }
    EXPECT_NEAR(acc / n, c.mu[a], 0.02);
  }
}

TEST(Simgen, IntegratedSquaredError) {
  const auto f = [](double w) { return std::sin(w); };
  EXPECT_EQ(integrated_squared_error(f, f, {0.0, 3.0}), 0.0);
  EXPECT_NEAR(integrated_squared_error([&](double w) { return f(w) + 0.1; }, f, {-1.0, 2.5}), 0.01 * 3.5, 1e-14);
  EXPECT_NEAR(mise({[](double) { return 0.2; }, [](double) { return 0.4; }}, [](double) { return 0.3; },
                   {{0.0, 1.0}, {0.0, 2.0}}),
              0.5 * (0.01 + 0.02), 1e-14);
}

TEST(Simgen, BiasTable) {
  const std::vector<std::string> names = {"a", "b"};
  const std::vector<double> truth = {2.0, 0.0};
  const auto rows = bias_table({{2.2, 0.1}, {1.8, -0.3}}, names, truth);
  EXPECT_NEAR(rows[0].mrb, 0.0, 1e-12);
  EXPECT_NEAR(rows[0].mstd, std::sqrt(0.08), 1e-12);
  EXPECT_TRUE(rows[1].absolute);
  EXPECT_NEAR(rows[1].mrb, -0.1, 1e-12);
  const auto same = bias_table({{2.0, 0.0}, {2.0, 0.0}}, names, truth);
  EXPECT_EQ(same[0].mrb, 0.0);
  EXPECT_EQ(same[0].mstd, 0.0);
  EXPECT_THROW(bias_table({{2.0, 0.0}}, names, truth), InvalidArgument);
}

TEST(Simgen, TrimmedRange) {
  std::vector<double> v(1001);
  for (int i = 0; i <= 1000; ++i) v[i] = i;
  const auto r = trimmed_range(v);
  EXPECT_NEAR(r[0], 5.0, 1e-12);
  EXPECT_NEAR(r[1], 995.0, 1e-12);
}

TEST(Simgen, GeneratingParametersBeatPerturbed) {
  int wins = 0;
  for (unsigned z = 0; z < 20; ++z) {
    SimConfig c;
    c.seed = 500 + z;
    c.N = 300;
    const SimDataset ds = simulate_dataset(c);
    const ModelSpec s = resolve_spec(sim_model_spec(c, 20, 40), ds.data);
    const auto theta_for = [&](double scale) {
      Eigen::VectorXd th = Eigen::VectorXd::Zero(s.dim());
      for (int j = 0; j < 2; ++j) {
        const int bi = s.smooth_blocks[j];
        for (int k = 0; k < 20; ++k) {
          const double x = s.smooth_bases[j].greville(k);
          const double phi = std::min(0.999, scale * true_phi(c, j + 1, x));
          th[s.offsets[bi] + k] = logit(phi);
        }
      }
      NaturalParams nat = unpack(s, make_packed(s, th));
      nat[s.block_index(Role::recapture, 0)][0] = c.p;
      nat[s.block_index(Role::recovery, 0)][0] = c.lambda;
      nat[s.block_index(Role::covproc_mu0, 0)][0] = c.mu0;
      nat[s.block_index(Role::covproc_sigma0, 0)][0] = c.sigma0;
      for (int a = 0; a < 2; ++a) {
        nat[s.block_index(Role::covproc_mu, a)][0] = c.mu[a];
        nat[s.block_index(Role::covproc_sigma, a)][0] = c.sigma[a];
        nat[s.block_index(Role::covproc_eta, a)][0] = c.eta[a];
      }
      Eigen::VectorXd out = pack(s, nat).theta;
      out.head(40) = th.head(40);
      return out;
    };
    const HmmLikelihood lik(s, ds.data);
    const double at = lik.evaluate(theta_for(1.0));
    wins += at > lik.evaluate(theta_for(1.2)) && at > lik.evaluate(theta_for(0.8));
  }
  EXPECT_GE(wins, 18);
}
