#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "lyaprobe/error.hpp"
#include "lyaprobe/evaluation.hpp"
#include "lyaprobe/probe.hpp"
#include "lyaprobe/random.hpp"
#include "support.hpp"

using namespace lyaprobe;
using lyaprobe::testing::brute_force_ap;
using lyaprobe::testing::TempDir;

namespace {

Scorer rigged(std::function<double(double)> v_of_delta) {
  return [v_of_delta](std::span<const Query> qs) {
    std::vector<double> out;
    for (const auto& q : qs) out.push_back(v_of_delta(q.delta));
    return out;
  };
}

std::vector<HiddenRecord> records_with_deltas(std::size_t n, const std::vector<double>& deltas) {
  std::vector<HiddenRecord> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].id = i;
    out[i].label = static_cast<std::uint8_t>(i % 2);
    out[i].states = {{1.0, 2.0}};
    for (double d : deltas) out[i].series.entries.push_back({d, {{1.0, 2.0}}});
  }
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Auprc, Examples) {
  const std::vector<double> s = {0.9, 0.8, 0.7, 0.6};
  const std::vector<std::uint8_t> y = {1, 0, 1, 0};
  EXPECT_NEAR(auprc(s, y), 5.0 / 6.0, 1e-15);
  const std::vector<std::uint8_t> separated = {1, 1, 0, 0};
  EXPECT_EQ(auprc(s, separated), 1.0);
  const std::vector<std::uint8_t> all = {1, 1, 1, 1};
  EXPECT_EQ(auprc(s, all), 1.0);
}

TEST(Auprc, UndefinedWithoutPositives) {
  const std::vector<double> s = {0.1, 0.2};
  const std::vector<std::uint8_t> y = {0, 0};
  EXPECT_THROW(auprc(s, y), UndefinedMetricError);
  EXPECT_THROW(auprc(std::span<const double>{}, std::span<const std::uint8_t>{}),
               UndefinedMetricError);
  const std::vector<std::uint8_t> short_labels = {1};
  EXPECT_THROW(auprc(s, short_labels), DimensionError);
}

TEST(Auprc, TiedScoresFormOneGroup) {
  const std::vector<double> s = {0.5, 0.5, 0.5, 0.5};
  const std::vector<std::uint8_t> y = {1, 0, 0, 1};
  EXPECT_DOUBLE_EQ(auprc(s, y), 0.5);
}

TEST(Auprc, MatchesBruteForceOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(200);
    const bool ties = trial % 2 == 0;
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = ties ? static_cast<double>(rng.below(8)) : rng.uniform();
      y[i] = rng.bernoulli(0.3);
    }
    y[rng.below(n)] = 1;
    ASSERT_NEAR(auprc(s, y), brute_force_ap(s, y), 1e-9) << "trial " << trial;
  }
}

TEST(Auprc, InvariantUnderIncreasingTransforms) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(50), t(50), u(50);
    std::vector<std::uint8_t> y(50);
    for (std::size_t i = 0; i < 50; ++i) {
      s[i] = static_cast<double>(rng.below(20)) / 20.0;
      t[i] = std::exp(3.0 * s[i]) - 7.0;
      u[i] = std::atan(s[i]);
      y[i] = rng.bernoulli(0.4);
    }
    y[0] = 1;
    const double base = auprc(s, y);
    EXPECT_EQ(auprc(t, y), base);
    EXPECT_EQ(auprc(u, y), base);
  }
}

TEST(Auprc, RandomScoresConcentrateAtPositiveRate) {
  Rng rng(3);
  double mean = 0.0, rate = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(1000);
    std::vector<std::uint8_t> y(1000);
    double pos = 0;
    for (std::size_t i = 0; i < 1000; ++i) {
      s[i] = rng.uniform();
      y[i] = rng.bernoulli(0.3);
      pos += y[i];
    }
    mean += auprc(s, y) / 100.0;
    rate += pos / 1000.0 / 100.0;
  }
  EXPECT_NEAR(mean, rate, 0.05);
}

TEST(DecayCurve, ConstantProbeIsFlat) {
  const auto recs = records_with_deltas(10, {0.05, 0.3, 0.55, 0.8, 1.4});
  const auto curve = decay_curve(rigged([](double) { return 0.5; }), recs, 10);
  for (const auto& b : curve)
    if (b.mean_v) EXPECT_NEAR(*b.mean_v, 0.5, 1e-9);
  EXPECT_EQ(curve.back().count, 10u);
  EXPECT_TRUE(is_non_increasing(curve, 0.0));
}

TEST(DecayCurve, LinearProbeDecreasesWithBinCenters) {
  Rng rng(4);
  std::vector<HiddenRecord> recs;
  for (std::size_t i = 0; i < 200; ++i) {
    std::vector<double> d(5);
    for (double& x : d) x = rng.uniform(0.001, 0.999);
    std::sort(d.begin(), d.end());
    auto r = records_with_deltas(1, d)[0];
    r.id = i;
    recs.push_back(r);
  }
  const auto curve = decay_curve(rigged([](double d) { return 1.0 - d / 2.0; }), recs, 10);
  std::optional<double> prev;
  for (const auto& b : curve) {
    ASSERT_TRUE(b.mean_v);
    const double center = (b.lo + b.hi) / 2.0;
    EXPECT_NEAR(*b.mean_v, 1.0 - center / 2.0, 0.025 + 1e-12);
    if (prev) EXPECT_LT(*b.mean_v, *prev);
    prev = b.mean_v;
  }
}

TEST(DecayCurve, BinsWithoutPointsAreEmptyNotZero) {
  const auto recs = records_with_deltas(4, {0.1, 0.2, 0.29});
  const auto curve = decay_curve(rigged([](double) { return 0.7; }), recs, 10);
  ASSERT_EQ(curve.size(), 10u);
  for (std::size_t b = 3; b < 10; ++b) {
    EXPECT_FALSE(curve[b].mean_v.has_value());
    EXPECT_EQ(curve[b].count, 0u);
  }
  EXPECT_EQ(curve[0].count, 4u);
  EXPECT_NE(decay_csv(curve).find(",NA,0"), std::string::npos);
}

TEST(DecayCurve, RequiresSeries) {
  auto recs = records_with_deltas(3, {});
  EXPECT_THROW(decay_curve(rigged([](double) { return 0.5; }), recs, 10), ContractError);
  EXPECT_THROW(violation_rate(rigged([](double) { return 0.5; }), recs), ContractError);
  recs = records_with_deltas(3, {0.1});
  EXPECT_THROW(decay_curve(rigged([](double) { return 0.5; }), recs, 0), ConfigError);
}

TEST(ViolationRate, RiggedProbes) {
  const std::vector<double> deltas = {0.1, 0.2, 0.3, 0.4};
  const auto recs = records_with_deltas(25, deltas);
  EXPECT_EQ(violation_rate(rigged([](double d) { return 0.9 - d; }), recs), 0.0);
  EXPECT_EQ(violation_rate(rigged([](double d) { return 0.1 + d; }), recs), 1.0);
  // Rises only between 0.2 and 0.3: one of four pairs.
  auto bump = [](double d) { return d > 0.25 ? 0.8 : 0.5 - d; };
  EXPECT_DOUBLE_EQ(violation_rate(rigged(bump), recs), 0.25);
  // Rises below the tolerance do not count.
  EXPECT_EQ(violation_rate(rigged([](double d) { return 0.5 + 1e-4 * d; }), recs), 0.0);
}

TEST(IsNonIncreasing, SkipsEmptyBinsAndUsesTolerance) {
  std::vector<DecayBin> c(4);
  c[0].mean_v = 0.8;
  c[2].mean_v = 0.805;
  c[3].mean_v = 0.7;
  EXPECT_FALSE(is_non_increasing(c, 0.001));
  EXPECT_TRUE(is_non_increasing(c, 0.01));
}

TEST(ProbeScorer, ThreadCountDoesNotChangeScores) {
  ProbeConfig pc;
  pc.num_layers = 2;
  pc.hidden_dim = 4;
  pc.probe_dim = 8;
  pc.attention_heads = 2;
  pc.classifier_widths = {8, 4, 1};
  pc.seed = 5;
  Checkpoint cp{pc, NormStats::identity(2, 4), init_probe(pc)};
  Rng rng(6);
  std::vector<LayerStates> states(37, LayerStates(2, std::vector<double>(4)));
  std::vector<Query> qs;
  for (auto& s : states) {
    for (auto& l : s)
      for (double& v : l) v = rng.normal();
    qs.push_back({&s, rng.uniform()});
  }
  const auto one = probe_scorer(cp, 1)(qs);
  const auto four = probe_scorer(cp, 4)(qs);
  EXPECT_EQ(one, four);
  for (std::size_t i = 0; i < qs.size(); ++i)
    EXPECT_NEAR(one[i], forward_V(cp.params, pc, *qs[i].states, qs[i].delta), 1e-12);
}

TEST(Evaluate, ReportCountsAndOptionalParts) {
  auto recs = records_with_deltas(6, {0.2, 0.6});
  const auto report = evaluate(rigged([](double d) { return 0.6 - d / 4; }), recs, 5);
  EXPECT_EQ(report.positives, 3u);
  EXPECT_EQ(report.negatives, 3u);
  ASSERT_TRUE(report.auprc);
  ASSERT_TRUE(report.violation_rate);
  EXPECT_EQ(*report.violation_rate, 0.0);
  EXPECT_EQ(report.decay.size(), 5u);

  for (auto& r : recs) r.label = 0;
  EXPECT_FALSE(evaluate(rigged([](double) { return 0.5; }), recs, 5).auprc);
}

TEST(Report, CsvFilesRoundTrip) {
  TempDir dir("report");
  EvalReport report;
  report.auprc = 0.123456789012345678;
  report.violation_rate = 0.25;
  report.positives = 3;
  report.negatives = 4;
  report.decay.resize(2);
  report.decay[0] = {0.0, 0.5, 0.9, 10};
  report.decay[1] = {0.5, 1.0, std::nullopt, 0};
  emit_report(report, dir.path(), {true, true});
  const std::string summary = slurp(dir / "summary.csv");
  const auto pos = summary.find("auprc,");
  ASSERT_NE(pos, std::string::npos);
  EXPECT_EQ(std::stod(summary.substr(pos + 6)), *report.auprc);
  EXPECT_NE(summary.find("records,7"), std::string::npos);
  EXPECT_EQ(slurp(dir / "per_layer.csv"), "layers,auprc\n");
  EXPECT_EQ(slurp(dir / "decay_curve.csv"),
            "bin_lo,bin_hi,mean_v,count\n0,0.5,0.90000000000000002,10\n0.5,1,NA,0\n");
  const std::string svg = slurp(dir / "decay_curve.svg");
  EXPECT_EQ(svg.rfind("<?xml", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  EXPECT_NE(svg.find("<polyline"), std::string::npos);
}

TEST(Report, PerLayerRowsAndMissingValues) {
  std::vector<LayerScore> scores = {{{0}, 0.5}, {{0, 2}, std::nullopt}};
  EXPECT_EQ(per_layer_csv(scores), "layers,auprc\n0,0.5\n0 2,NA\n");
  EvalReport empty;
  EXPECT_NE(summary_csv(empty).find("auprc,NA"), std::string::npos);
}

TEST(Report, UnwritablePathIsIoError) {
  TempDir dir("report_bad");
  std::ofstream(dir / "file") << "x";
  EXPECT_THROW(emit_report(EvalReport{}, dir / "file" / "sub"), IoError);
}

TEST(Report, SvgEscapesLabels) {
  const std::vector<NamedCurve> curves = {{"a<b & c", {{0.0, 1.0, 0.5, 1}}}};
  const std::string svg = decay_svg(curves);
  EXPECT_NE(svg.find("a&lt;b &amp; c"), std::string::npos);
}

TEST(FormatReal, RoundTripsExactly) {
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.normal() * std::pow(10.0, static_cast<double>(rng.below(20)) - 10.0);
    EXPECT_EQ(std::stod(format_real(x)), x);
  }
}
