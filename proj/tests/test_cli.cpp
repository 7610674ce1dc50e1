#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "../tools/cli.hpp"
#include "lyaprobe/binio.hpp"
#include "lyaprobe/error.hpp"
#include "lyaprobe/kvconfig.hpp"
#include "support.hpp"

using namespace lyaprobe;
using lyaprobe::testing::TempDir;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

void write(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small world plus a fast probe, shared by every test in this file.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    write(*dir_ / "world.cfg",
          "# tiny world\nrecords = 150\nhidden_dim = 8\nseries_length = 3\n");
    write(*dir_ / "run.cfg",
          "probe_dim = 8\nattention_heads = 2\nclassifier_widths = 8,4,1\n"
          "epochs_stage1 = 2\nepochs_stage2 = 2\nwarmup_epochs = 1\nbatch_size = 16\n");
    ASSERT_EQ(invoke({"synth", "--out", path("w.lypd"), "--config", path("world.cfg"), "--seed", "42"})
                  .code,
              0);
    ASSERT_EQ(invoke({"train", "--data", path("w.lypd"), "--out-dir", path("run"), "--config",
                   path("run.cfg"), "--seed", "1"})
                  .code,
              0);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string path(const std::string& name) { return (*dir_ / name).string(); }
  static TempDir* dir_;
};

TempDir* CliTest::dir_ = nullptr;

}  // namespace

TEST(KvConfig, ParsesCommentsAndWhitespace) {
  const auto kv = parse_kv("# c\n\n  a = 1  \nb=two words\n");
  ASSERT_EQ(kv.size(), 2u);
  EXPECT_EQ(kv[0], (std::pair<std::string, std::string>{"a", "1"}));
  EXPECT_EQ(kv[1].second, "two words");
}

TEST(KvConfig, MalformedLinesAndDuplicates) {
  EXPECT_THROW(parse_kv("just text\n"), ConfigError);
  EXPECT_THROW(parse_kv("a = 1\na = 2\n"), ConfigError);
  EXPECT_THROW(parse_kv(" = 3\n"), ConfigError);
}

TEST(KvConfig, ErrorsNameTheKey) {
  WorldConfig w;
  try {
    apply_world_config(parse_kv("records = many\n"), w);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'records'"), std::string::npos);
  }
  try {
    apply_world_config(parse_kv("colour = red\n"), w);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'colour'"), std::string::npos);
  }
  RunConfig r;
  try {
    apply_run_config(parse_kv("classifier_widths = 8,4\n"), r);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("classifier_widths"), std::string::npos);
  }
  EXPECT_THROW(apply_run_config(parse_kv("regenerate_series = maybe\n"), r), ConfigError);
  EXPECT_THROW(apply_run_config(parse_kv("lyapunov_mode = sideways\n"), r), ConfigError);
}

TEST(KvConfig, AppliesValues) {
  WorldConfig w;
  apply_world_config(parse_kv("region_fractions = 0.3,0.3,0.4\nseries_scheme = sigma_grid\n"
                              "label_noise = 0.1\n"),
                     w);
  EXPECT_EQ(w.region_fractions, (std::array<double, 3>{0.3, 0.3, 0.4}));
  EXPECT_EQ(w.series_scheme, SeriesScheme::SigmaGrid);
  EXPECT_EQ(w.label_noise, 0.1);
  RunConfig r;
  apply_run_config(parse_kv("seed = 9\nlayers = 0,2\nlyapunov_mode = input_derivative\n"
                            "lambda_max = 0\n"),
                   r);
  EXPECT_EQ(r.train.seed, 9u);
  EXPECT_EQ(r.probe.seed, 9u);
  EXPECT_EQ(r.layers, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(r.train.lyapunov_mode, LyapunovMode::InputDerivative);
  EXPECT_EQ(r.train.lambda_max, 0.0);
}

TEST(KvConfig, IndexLists) {
  EXPECT_EQ(parse_index_list("k", "3, 1,2"), (std::vector<std::size_t>{3, 1, 2}));
  EXPECT_THROW(parse_index_list("k", ""), ConfigError);
  EXPECT_THROW(parse_index_list("k", "1,,2"), ConfigError);
  EXPECT_THROW(parse_index_list("k", "-1"), ConfigError);
}

TEST_F(CliTest, SynthIsDeterministicAndInspectable) {
  ASSERT_EQ(invoke({"synth", "--out", path("again.lypd"), "--config", path("world.cfg"), "--seed",
                 "42"})
                .code,
            0);
  EXPECT_EQ(slurp(path("w.lypd")), slurp(path("again.lypd")));
  const auto r = invoke({"inspect", path("w.lypd")});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("format,LYPD"), std::string::npos);
  EXPECT_NE(r.out.find("records,150"), std::string::npos);
  EXPECT_NE(r.out.find("manifest.seed,42"), std::string::npos);
}

TEST_F(CliTest, SynthSeedOverridesConfig) {
  ASSERT_EQ(invoke({"synth", "--out", path("s7.lypd"), "--config", path("world.cfg"), "--seed", "7"})
                .code,
            0);
  EXPECT_NE(slurp(path("w.lypd")), slurp(path("s7.lypd")));
}

TEST_F(CliTest, MalformedConfigExitsTwoNamingKey) {
  write(*dir_ / "bad.cfg", "records = 10\nboundary_wdth = 0.5\n");
  const auto r = invoke({"synth", "--out", path("bad.lypd"), "--config", path("bad.cfg")});
  EXPECT_EQ(r.code, cli::kConfigExit);
  EXPECT_NE(r.err.find("boundary_wdth"), std::string::npos);
  EXPECT_TRUE(r.out.empty());
  EXPECT_FALSE(std::filesystem::exists(path("bad.lypd")));
}

TEST_F(CliTest, UnknownFlagIsUsageError) {
  EXPECT_EQ(invoke({"synth", "--out", path("x.lypd"), "--bogus"}).code, cli::kConfigExit);
  EXPECT_EQ(invoke({"no-such-command"}).code, cli::kConfigExit);
}

TEST_F(CliTest, TrainWritesCheckpointAndLog) {
  EXPECT_TRUE(std::filesystem::exists(path("run/probe.lypr")));
  const std::string log = slurp(path("run/train_log.csv"));
  EXPECT_EQ(log.rfind("epoch,stage,lambda,bce,lyapunov,val_auprc\n", 0), 0u);
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 5);
  const auto r = invoke({"inspect", path("run/probe.lypr")});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("format,LYPR"), std::string::npos);
  EXPECT_NE(r.out.find("probe_dim,8"), std::string::npos);
}

TEST_F(CliTest, EvalWritesReportWithAuprcInRange) {
  const auto r = invoke({"eval", "--checkpoint", path("run/probe.lypr"), "--data", path("w.lypd"),
                      "--out-dir", path("eval"), "--svg", "--config", path("run.cfg"), "--seed",
                      "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string summary = slurp(path("eval/summary.csv"));
  const auto pos = summary.find("auprc,");
  ASSERT_NE(pos, std::string::npos);
  const double a = std::stod(summary.substr(pos + 6));
  EXPECT_GT(a, 0.0);
  EXPECT_LT(a, 1.0);
  EXPECT_EQ(r.out, summary);
  EXPECT_TRUE(std::filesystem::exists(path("eval/decay_curve.csv")));
  EXPECT_TRUE(std::filesystem::exists(path("eval/decay_curve.svg")));
  EXPECT_EQ(slurp(path("eval/per_layer.csv")), "layers,auprc\n");
}

TEST_F(CliTest, EvalThreadsDoNotChangeArtifacts) {
  ASSERT_EQ(invoke({"eval", "--checkpoint", path("run/probe.lypr"), "--data", path("w.lypd"),
                 "--out-dir", path("t1"), "--split", "all", "--threads", "1"})
                .code,
            0);
  ASSERT_EQ(invoke({"eval", "--checkpoint", path("run/probe.lypr"), "--data", path("w.lypd"),
                 "--out-dir", path("t3"), "--split", "all", "--threads", "3"})
                .code,
            0);
  for (const char* f : {"summary.csv", "decay_curve.csv"})
    EXPECT_EQ(slurp(path(std::string("t1/") + f)), slurp(path(std::string("t3/") + f)));
}

TEST_F(CliTest, VerifyStabilityWithBaseline) {
  const auto r = invoke({"verify-stability", "--checkpoint", path("run/probe.lypr"), "--baseline",
                      path("run/probe.lypr"), "--data", path("w.lypd"), "--out-dir",
                      path("vs"), "--svg"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(path("vs/decay_curve.csv")), slurp(path("vs/baseline_decay_curve.csv")));
  EXPECT_NE(r.out.find("baseline_violation_rate,"), std::string::npos);
  EXPECT_NE(slurp(path("vs/decay_curve.svg")).find("</svg>"), std::string::npos);
}

TEST_F(CliTest, AblateLayersWritesOneRowPerSubsetPlusAll) {
  const auto r = invoke({"ablate-layers", "--data", path("w.lypd"), "--out-dir", path("ab"),
                      "--config", path("run.cfg"), "--subsets", "0;2;0,1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = slurp(path("ab/per_layer.csv"));
  EXPECT_EQ(csv.rfind("layers,auprc\n0,", 0), 0u);
  EXPECT_NE(csv.find("\n0 1 2,"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_EQ(invoke({"ablate-layers", "--data", path("w.lypd"), "--out-dir", path("ab2"),
                 "--subsets", "0;;1"})
                .code,
            cli::kConfigExit);
}

TEST_F(CliTest, InspectRejectsTruncatedFileWithChecksumMessage) {
  const std::string bytes = slurp(path("w.lypd"));
  write(*dir_ / "cut.lypd", bytes.substr(0, bytes.size() - 100));
  const auto r = invoke({"inspect", path("cut.lypd")});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("checksum"), std::string::npos);
  EXPECT_TRUE(r.out.empty());
}

TEST_F(CliTest, MissingFileIsIoExit) {
  EXPECT_EQ(invoke({"inspect", path("nope.lypd")}).code, cli::kIoExit);
}

TEST_F(CliTest, MismatchedCheckpointIsDimensionExit) {
  write(*dir_ / "wide.cfg", "records = 40\nhidden_dim = 12\nseries_length = 2\n");
  ASSERT_EQ(invoke({"synth", "--out", path("wide.lypd"), "--config", path("wide.cfg")}).code, 0);
  const auto r = invoke({"eval", "--checkpoint", path("run/probe.lypr"), "--data", path("wide.lypd"),
                      "--out-dir", path("mm")});
  EXPECT_EQ(r.code, cli::kConfigExit);
  EXPECT_NE(r.err.find("width"), std::string::npos);
}

TEST_F(CliTest, AllNegativeEvalReportsUndefinedMetric) {
  write(*dir_ / "neg.cfg",
        "records = 40\nhidden_dim = 8\nseries_length = 2\nregion_fractions = 0,1,0\n"
        "label_noise = 0\n");
  ASSERT_EQ(invoke({"synth", "--out", path("neg.lypd"), "--config", path("neg.cfg")}).code, 0);
  const auto r = invoke({"eval", "--checkpoint", path("run/probe.lypr"), "--data", path("neg.lypd"),
                      "--out-dir", path("neg"), "--split", "all"});
  EXPECT_EQ(r.code, cli::kUndefinedMetricExit);
  EXPECT_NE(slurp(path("neg/summary.csv")).find("auprc,NA"), std::string::npos);
}
