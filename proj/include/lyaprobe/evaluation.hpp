#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lyaprobe/dataset.hpp"
#include "lyaprobe/probe.hpp"

namespace lyaprobe {

// Average precision with step interpolation. Items sharing a score form one
// group whose precision is taken after the whole group is included.
// Throws UndefinedMetricError when there are no positive labels.
double auprc(std::span<const double> scores, std::span<const std::uint8_t> labels);

// One probe evaluation request: V(states, delta).
struct Query {
  const LayerStates* states = nullptr;
  double delta = 0.0;
};

// Maps queries to V values, in order.
using Scorer = std::function<std::vector<double>(std::span<const Query>)>;

// Scores raw (unnormalized) states with a checkpoint: applies its
// normalization stats, then runs batched forwards. Work is split across
// `threads` workers in contiguous chunks; results do not depend on the count.
Scorer probe_scorer(const Checkpoint& checkpoint, std::size_t threads = 1);

// Validation AUPRC of V(h, 0); nullopt when the labels have no positives.
std::optional<double> score_auprc(const Scorer& scorer, std::span<const HiddenRecord> records);

struct DecayBin {
  double lo = 0.0;
  double hi = 0.0;
  std::optional<double> mean_v;  // empty bins carry no mean
  std::size_t count = 0;
};

inline constexpr double kDecayRange = 1.0;

// V at delta 0 and at every stored series point, binned into equal-width
// delta bins over [0, 1]; deltas above 1 fall into the last bin.
std::vector<DecayBin> decay_curve(const Scorer& scorer, std::span<const HiddenRecord> records,
                                  std::size_t bins);

inline constexpr double kViolationTolerance = 1e-3;

// Fraction of adjacent (delta, V) pairs, with (0, V0) prepended per record,
// where V rises by more than `tolerance`.
double violation_rate(const Scorer& scorer, std::span<const HiddenRecord> records,
                      double tolerance = kViolationTolerance);

// True when every adjacent pair of nonempty bins rises by at most `tolerance`.
bool is_non_increasing(std::span<const DecayBin> curve, double tolerance);

struct LayerScore {
  std::vector<std::size_t> layers;
  std::optional<double> auprc;
};

struct EvalReport {
  std::optional<double> auprc;
  std::vector<DecayBin> decay;
  std::optional<double> violation_rate;
  std::vector<LayerScore> per_layer;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

// AUPRC on V0 plus, when records carry series, the decay curve and violation rate.
EvalReport evaluate(const Scorer& scorer, std::span<const HiddenRecord> records,
                    std::size_t bins);

struct ReportFormats {
  bool csv = true;
  bool svg = false;
};

// Writes summary.csv, decay_curve.csv and per_layer.csv (and decay_curve.svg).
void emit_report(const EvalReport& report, const std::filesystem::path& dir,
                 ReportFormats formats = {});

std::string summary_csv(const EvalReport& report);
std::string decay_csv(std::span<const DecayBin> curve);
std::string per_layer_csv(std::span<const LayerScore> scores);
std::string format_layers(std::span<const std::size_t> layers);

struct NamedCurve {
  std::string label;
  std::vector<DecayBin> bins;
};

// Self-contained SVG line plot, one polyline per curve.
std::string decay_svg(std::span<const NamedCurve> curves);

// Full-precision decimal rendering (17 significant digits).
std::string format_real(double value);

}  // namespace lyaprobe
