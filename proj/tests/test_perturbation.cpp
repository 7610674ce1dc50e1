#include <gtest/gtest.h>

#include <cmath>

#include "lyaprobe/error.hpp"
#include "lyaprobe/perturbation.hpp"
#include "lyaprobe/random.hpp"

using namespace lyaprobe;

namespace {

LayerStates random_states(std::uint64_t seed, std::size_t layers = 3, std::size_t dim = 16) {
  Rng rng(seed);
  LayerStates s(layers, std::vector<double>(dim));
  for (auto& layer : s)
    for (double& v : layer) v = rng.normal() + 0.3;
  return s;
}

std::vector<double> deltas_of(const PerturbationSeries& series) {
  std::vector<double> d;
  for (const auto& e : series.entries) d.push_back(e.delta);
  return d;
}

}  // namespace

TEST(DeltaOf, Examples) {
  const std::vector<double> h = {1.0, 0.0};
  EXPECT_EQ(delta_of(h, h), 0.0);
  EXPECT_DOUBLE_EQ(delta_of(h, std::vector<double>{0.0, 1.0}), 1.0);
  EXPECT_NEAR(delta_of(h, std::vector<double>{1.0, 1.0}), 1.0 - 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(delta_of(h, std::vector<double>{-1.0, 0.0}), 2.0);
}

TEST(DeltaOf, ZeroNormIsDegenerate) {
  EXPECT_THROW(delta_of(std::vector<double>{0, 0}, std::vector<double>{1, 0}), DegenerateInputError);
  EXPECT_THROW(delta_of(std::vector<double>{1, 0}, std::vector<double>{1, 0, 0}), DimensionError);
}

TEST(DeltaOf, IdentitySymmetryAndScaleInvariance) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(7), b(7);
    for (double& v : a) v = rng.normal();
    for (double& v : b) v = rng.normal();
    EXPECT_EQ(delta_of(a, a), 0.0);
    EXPECT_EQ(delta_of(a, b), delta_of(b, a));
    const double sa = rng.uniform(0.1, 10.0), sb = rng.uniform(0.1, 10.0);
    std::vector<double> as = a, bs = b;
    for (double& v : as) v *= sa;
    for (double& v : bs) v *= sb;
    EXPECT_NEAR(delta_of(as, bs), delta_of(a, b), 1e-12);
    const double d = delta_of(a, b);
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 2.0);
  }
}

TEST(DeltaOf, LayerStatesUseConcatenation) {
  const LayerStates a = {{1.0, 0.0}, {0.0, 0.0}};
  const LayerStates b = {{0.0, 0.0}, {0.0, 1.0}};
  EXPECT_DOUBLE_EQ(delta_of(a, b), 1.0);
}

TEST(GaussianPerturb, ZeroSigmaIsIdentity) {
  const auto s = random_states(1);
  const auto p = gaussian_perturb(s, 0.0, 9);
  EXPECT_EQ(p.states, s);
  EXPECT_EQ(p.delta, 0.0);
}

TEST(GaussianPerturb, DeterministicAndDeltaMatchesStates) {
  const auto s = random_states(2);
  const auto a = gaussian_perturb(s, 0.3, 17);
  const auto b = gaussian_perturb(s, 0.3, 17);
  EXPECT_EQ(a.states, b.states);
  EXPECT_EQ(a.delta, b.delta);
  EXPECT_DOUBLE_EQ(a.delta, delta_of(s, a.states));
  EXPECT_NE(gaussian_perturb(s, 0.3, 18).states, a.states);
}

TEST(GaussianPerturb, ErrorsOnBadInput) {
  auto s = random_states(3);
  EXPECT_THROW(gaussian_perturb(s, -0.1, 1), ConfigError);
  s[1].assign(s[1].size(), 0.0);
  EXPECT_THROW(gaussian_perturb(s, 0.1, 1), DegenerateInputError);
}

TEST(GaussianPerturb, ExpectedDeltaGrowsWithSigma) {
  const auto s = random_states(4, 3, 64);
  const auto grid = log_spaced(0.05, 0.8, 6);
  double previous = 0.0;
  for (double sigma : grid) {
    double mean = 0.0;
    for (std::uint64_t t = 0; t < 200; ++t) mean += gaussian_perturb(s, sigma, t).delta / 200.0;
    EXPECT_GT(mean, previous) << sigma;
    previous = mean;
  }
}

TEST(LogSpaced, EndpointsAndRatio) {
  const auto g = log_spaced(0.05, 0.8, 6);
  ASSERT_EQ(g.size(), 6u);
  EXPECT_NEAR(g.front(), 0.05, 1e-15);
  EXPECT_NEAR(g.back(), 0.8, 1e-15);
  for (std::size_t i = 2; i < g.size(); ++i) EXPECT_NEAR(g[i] / g[i - 1], g[1] / g[0], 1e-12);
  EXPECT_THROW(log_spaced(0.0, 1.0, 3), ConfigError);
}

TEST(BuildSeries, SixLogSpacedSigmasGiveSixIncreasingEntries) {
  const auto s = random_states(42, 3, 32);
  const auto grid = log_spaced(0.05, 0.8, 6);
  const auto series = build_series(s, 6, grid, 42);
  ASSERT_EQ(series.size(), 6u);
  const auto d = deltas_of(series);
  for (std::size_t i = 1; i < d.size(); ++i) EXPECT_GT(d[i], d[i - 1]);
  EXPECT_GT(d.front(), 0.0);
  EXPECT_LE(d.back(), 2.0);
  EXPECT_NO_THROW(series.validate());
  for (const auto& e : series.entries) EXPECT_DOUBLE_EQ(e.delta, delta_of(s, e.states));
}

TEST(BuildSeries, SingleEntryAndDeterminism) {
  const auto s = random_states(5);
  const std::vector<double> one = {0.2};
  EXPECT_EQ(build_series(s, 1, one, 3).size(), 1u);
  const auto grid = log_spaced(0.05, 0.8, 6);
  const auto a = build_series(s, 6, grid, 11);
  const auto b = build_series(s, 6, grid, 11);
  EXPECT_EQ(deltas_of(a), deltas_of(b));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.entries[i].states, b.entries[i].states);
}

TEST(BuildSeries, InvariantsOverManySeeds) {
  const auto grid = log_spaced(0.05, 0.8, 6);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto series = build_series(random_states(100 + seed), 6, grid, seed);
    const auto d = deltas_of(series);
    ASSERT_FALSE(d.empty());
    for (std::size_t i = 0; i < d.size(); ++i) {
      EXPECT_GT(d[i], 0.0);
      EXPECT_LE(d[i], 2.0);
      if (i > 0) EXPECT_GT(d[i], d[i - 1]);
    }
  }
}

TEST(BuildSeries, ConfigErrors) {
  const auto s = random_states(6);
  const std::vector<double> grid = {0.1, 0.2};
  EXPECT_THROW(build_series(s, 0, {}, 1), ConfigError);
  EXPECT_THROW(build_series(s, 3, grid, 1), ConfigError);
  const std::vector<double> bad = {0.1, -0.2};
  EXPECT_THROW(build_series(s, 2, bad, 1), ConfigError);
}

TEST(SeriesValidate, RejectsDisorderAndRange) {
  PerturbationSeries series;
  series.entries = {{0.2, {}}, {0.1, {}}};
  EXPECT_THROW(series.validate(), ContractError);
  series.entries = {{0.0, {}}};
  EXPECT_THROW(series.validate(), ContractError);
  series.entries = {{2.5, {}}};
  EXPECT_THROW(series.validate(), ContractError);
}

TEST(TargetedPerturb, HitsTargetDelta) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = random_states(200 + seed);
    for (double target : {0.01, 0.25, 0.5, 0.95}) {
      const auto p = targeted_perturb(s, target, seed);
      EXPECT_NEAR(p.delta, target, 1e-12);
      EXPECT_NEAR(delta_of(s, p.states), target, 1e-12);
    }
  }
}

TEST(TargetedPerturb, SeriesAndErrors) {
  const auto s = random_states(7);
  const auto centers = bin_centers(6);
  ASSERT_EQ(centers.size(), 6u);
  EXPECT_DOUBLE_EQ(centers.front(), 0.5 / 6.0);
  EXPECT_DOUBLE_EQ(centers.back(), 5.5 / 6.0);
  const auto series = build_targeted_series(s, centers, 4);
  ASSERT_EQ(series.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(series.entries[i].delta, centers[i], 1e-12);
  EXPECT_THROW(targeted_perturb(s, 0.0, 1), ConfigError);
  EXPECT_THROW(targeted_perturb(s, 1.0, 1), ConfigError);
  const std::vector<double> disorder = {0.5, 0.2};
  EXPECT_THROW(build_targeted_series(s, disorder, 1), ConfigError);
}

TEST(SeriesKind, StringRoundTrip) {
  for (auto k : {SeriesKind::Representational, SeriesKind::Semantic, SeriesKind::Synthetic})
    EXPECT_EQ(series_kind_from_string(to_string(k)), k);
  EXPECT_THROW(series_kind_from_string("bogus"), ConfigError);
}
