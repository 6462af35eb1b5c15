#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "helpers.hpp"
#include "hmm_oracle.hpp"
#include "semicjs/lik_hmm.hpp"

using namespace semicjs;
using testutil::brute_force;
using testutil::ncdf;
using testutil::history;

namespace {

std::vector<EncounterHistory> sample_histories() {
  using O = std::optional<double>;
  const O n;
  return {
      history({1, 0, 1, 0, 0}, {O(0.3), n, O(-0.4), n, n}),
      history({1, 1, 0, 2, 0}, {O(0.1), n, n, n, n}),
      history({0, 1, 1, 1, 1}, {n, O(1.2), O(0.9), n, O(-1.6)}, 2),
      history({1, 0, 0, 0, 0}, {n, n, n, n, n}),
      history({1, 0, 0, 0, 0}, {O(-0.8), n, n, n, n}, 1),
      history({0, 0, 1, 0, 2}, {n, n, O(2.4), n, n}),
      history({1, 1, 1, 0, 0}, {O(0.5), O(0.2), O(0.4), n, n}),
      history({1, 0, 0, 0, 1}, {O(0.0), n, n, n, O(0.7)}),
      history({0, 0, 0, 0, 1}, {n, n, n, n, O(0.1)}),
  };
}

}  // namespace

TEST(HmmGrid, BinMassesSumToOneAndMatchCdf) {
  const CovGrid g = make_grid(7, -2.0, 3.0);
  std::vector<double> mass(7);
  for (double mean : {-5.0, 0.0, 0.4, 9.0}) {
    bin_masses(g, mean, 0.8, mass.data());
    double s = 0.0;
    for (int k = 0; k < 7; ++k) {
      const double a = k == 0 ? 0.0 : ncdf((g.edges[k] - mean) / 0.8);
      const double b = k == 6 ? 1.0 : ncdf((g.edges[k + 1] - mean) / 0.8);
      EXPECT_NEAR(mass[k], b - a, 1e-14);
      s += mass[k];
    }
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
}

TEST(HmmGrid, BinMassDerivativesMatchFiniteDifferences) {
  const CovGrid g = make_grid(9, -1.0, 2.0);
  std::vector<double> m0(9), dm(9), ds(9), mp(9), mm(9);
  const double mean = 0.3, sd = 0.45, eps = 1e-6;
  bin_masses(g, mean, sd, m0.data(), dm.data(), ds.data());
  bin_masses(g, mean + eps, sd, mp.data());
  bin_masses(g, mean - eps, sd, mm.data());
  for (int k = 0; k < 9; ++k) EXPECT_NEAR(dm[k], (mp[k] - mm[k]) / (2 * eps), 1e-7);
  bin_masses(g, mean, sd + eps, mp.data());
  bin_masses(g, mean, sd - eps, mm.data());
  for (int k = 0; k < 9; ++k) EXPECT_NEAR(ds[k], (mp[k] - mm[k]) / (2 * eps), 1e-7);
}

TEST(HmmGrid, TransitionRowsAreStochastic) {
  const ModelSpec spec = testutil::hmm_spec(5, 6, -2.5, 2.5);
  const PackedParams pk = make_packed(spec, testutil::random_theta(spec.dim(), 3));
  const CovGrid g = make_grid(spec);
  for (int a = 0; a < 2; ++a) {
    const TransitionMatrix tm = build_transition(g, spec, pk, a);
    for (int j = 0; j < 8; ++j) EXPECT_NEAR(tm.matrix.row(j).sum(), 1.0, 1e-12);
    EXPECT_GE(tm.max_tail_mass, 0.0);
  }
}

TEST(HmmLikelihood, ReferenceMatchesPathEnumeration) {
  const ModelSpec spec = testutil::hmm_spec(5, 4, -2.5, 2.5);
  for (unsigned seed : {1u, 2u, 3u}) {
    const Eigen::VectorXd th = testutil::random_theta(spec.dim(), seed);
    const PackedParams pk = make_packed(spec, th);
    const CovGrid g = make_grid(spec);
    for (const auto& h : sample_histories()) {
      EXPECT_NEAR(loglik_hmm(h, g, spec, pk), brute_force(h, spec, th), 1e-10);
    }
  }
}

TEST(HmmLikelihood, FastEvaluatorMatchesReference) {
  const ModelSpec spec = testutil::hmm_spec(5, 12, -3.0, 3.0);
  const HistoryData data{5, sample_histories()};
  const HmmLikelihood lik(spec, data);
  const CovGrid g = make_grid(spec);
  for (unsigned seed : {4u, 5u}) {
    const Eigen::VectorXd th = testutil::random_theta(spec.dim(), seed);
    const PackedParams pk = make_packed(spec, th);
    const std::vector<double> ind = lik.individual(th);
    double ref = 0.0;
    for (std::size_t i = 0; i < data.histories.size(); ++i) {
      const double r = loglik_hmm(data.histories[i], g, spec, pk);
      EXPECT_NEAR(ind[i], r, 1e-10) << "history " << i;
      ref += r;
    }
    EXPECT_NEAR(lik.evaluate(th), ref, 1e-9);
  }
}

TEST(HmmLikelihood, GradientMatchesFiniteDifferences) {
  const ModelSpec spec = testutil::hmm_spec(5, 10, -3.0, 3.0);
  const HistoryData data{5, sample_histories()};
  const HmmLikelihood lik(spec, data);
  const Eigen::VectorXd th = testutil::random_theta(spec.dim(), 11);
  Eigen::VectorXd grad;
  lik.evaluate(th, &grad);
  for (int i = 0; i < spec.dim(); ++i) {
    const double eps = 1e-6;
    Eigen::VectorXd a = th, b = th;
    a[i] += eps;
    b[i] -= eps;
    const double fd = (lik.evaluate(a) - lik.evaluate(b)) / (2 * eps);
    EXPECT_NEAR(grad[i], fd, 1e-6 * (1.0 + std::abs(fd))) << "coordinate " << i;
  }
}

TEST(HmmLikelihood, SingleOccasionHistory) {
  const ModelSpec spec = testutil::hmm_spec(5, 6, -3.0, 3.0);
  const Eigen::VectorXd th = testutil::random_theta(spec.dim(), 7);
  const PackedParams pk = make_packed(spec, th);
  const CovProcess cp = covariate_process(spec, th);
  const CovGrid g = make_grid(spec);
  using O = std::optional<double>;
  const auto h = history({0, 0, 0, 0, 1}, {O(), O(), O(), O(), O(0.25)});
  EXPECT_NEAR(loglik_hmm(h, g, spec, pk), std::log(normal_density(0.25, cp.mu0, cp.sigma0)), 1e-12);
  const auto h2 = history({0, 0, 0, 0, 1}, {O(), O(), O(), O(), O()});
  EXPECT_NEAR(loglik_hmm(h2, g, spec, pk), 0.0, 1e-12);
}
