#include "lyaprobe/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "lyaprobe/error.hpp"

namespace lyaprobe {

double auprc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    throw DimensionError("auprc: " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(labels.size()) + " labels");
  }
  if (scores.empty()) throw UndefinedMetricError("auprc: no items");
  std::size_t positives = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] > 1) throw ContractError("auprc: labels must be 0/1");
    if (std::isnan(scores[i])) throw NumericalError("auprc: NaN score");
    positives += labels[i];
  }
  if (positives == 0) throw UndefinedMetricError("auprc: undefined without positive labels");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::size_t seen = 0, true_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i, group_pos = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      group_pos += labels[order[j]];
      ++j;
    }
    seen += j - i;
    true_pos += group_pos;
    if (group_pos) {
      const double precision = static_cast<double>(true_pos) / static_cast<double>(seen);
      ap += precision * static_cast<double>(group_pos) / static_cast<double>(positives);
    }
    i = j;
  }
  return ap;
}

Scorer probe_scorer(const Checkpoint& checkpoint, std::size_t threads) {
  threads = std::max<std::size_t>(1, threads);
  return [ck = checkpoint, threads](std::span<const Query> queries) {
    std::vector<double> out(queries.size());
    constexpr std::size_t kChunk = 512;
    auto run_range = [&](std::size_t begin, std::size_t end) {
      for (std::size_t lo = begin; lo < end; lo += kChunk) {
        const std::size_t hi = std::min(end, lo + kChunk);
        std::vector<LayerStates> normed;
        normed.reserve(hi - lo);
        std::vector<double> deltas;
        for (std::size_t i = lo; i < hi; ++i) {
          normed.push_back(*queries[i].states);
          ck.stats.apply(normed.back());
          deltas.push_back(queries[i].delta);
        }
        std::vector<const LayerStates*> ptrs;
        for (const auto& s : normed) ptrs.push_back(&s);
        const auto v = forward(ck.params, ck.config, make_batch(ptrs, deltas));
        std::copy(v.data().begin(), v.data().end(), out.begin() + static_cast<std::ptrdiff_t>(lo));
      }
    };
    if (threads == 1 || queries.size() <= kChunk) {
      run_range(0, queries.size());
      return out;
    }
    // Contiguous, chunk-aligned ranges; rows are independent so the split
    // does not change any value.
    const std::size_t chunks = (queries.size() + kChunk - 1) / kChunk;
    const std::size_t per = (chunks + threads - 1) / threads;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t begin = std::min(queries.size(), t * per * kChunk);
      const std::size_t end = std::min(queries.size(), (t + 1) * per * kChunk);
      if (begin < end) pool.emplace_back(run_range, begin, end);
    }
    for (auto& th : pool) th.join();
    return out;
  };
}

std::optional<double> score_auprc(const Scorer& scorer, std::span<const HiddenRecord> records) {
  if (records.empty()) return std::nullopt;
  std::vector<Query> queries;
  std::vector<std::uint8_t> labels;
  bool any_positive = false;
  for (const auto& r : records) {
    queries.push_back({&r.states, 0.0});
    labels.push_back(r.label);
    any_positive = any_positive || r.label == 1;
  }
  if (!any_positive) return std::nullopt;
  const auto scores = scorer(queries);
  return auprc(scores, labels);
}

namespace {

// Per record: [V0, V(delta_1), ..., V(delta_K)].
std::vector<std::vector<double>> series_values(const Scorer& scorer,
                                               std::span<const HiddenRecord> records) {
  std::vector<Query> queries;
  bool any_series = false;
  for (const auto& r : records) {
    queries.push_back({&r.states, 0.0});
    for (const auto& e : r.series.entries) queries.push_back({&e.states, e.delta});
    any_series = any_series || !r.series.empty();
  }
  if (!any_series) {
    throw ContractError(
        "records carry no perturbation series; rebuild the dataset with perturbations "
        "(e.g. synth with series_length > 0)");
  }
  const auto v = scorer(queries);
  std::vector<std::vector<double>> out;
  std::size_t pos = 0;
  for (const auto& r : records) {
    const std::size_t n = r.series.size() + 1;
    out.emplace_back(v.begin() + static_cast<std::ptrdiff_t>(pos),
                     v.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
  }
  return out;
}

}  // namespace

std::vector<DecayBin> decay_curve(const Scorer& scorer, std::span<const HiddenRecord> records,
                                  std::size_t bins) {
  if (bins == 0) throw ConfigError("decay_curve: bins must be positive");
  const auto values = series_values(scorer, records);
  const double width = kDecayRange / static_cast<double>(bins);
  std::vector<double> sums(bins, 0.0);
  std::vector<std::size_t> counts(bins, 0);
  auto add = [&](double delta, double v) {
    const auto b = std::min(bins - 1, static_cast<std::size_t>(std::floor(delta / width)));
    sums[b] += v;
    counts[b] += 1;
  };
  for (std::size_t i = 0; i < records.size(); ++i) {
    add(0.0, values[i][0]);
    for (std::size_t k = 0; k < records[i].series.size(); ++k) {
      add(records[i].series.entries[k].delta, values[i][k + 1]);
    }
  }
  std::vector<DecayBin> out(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    out[b].lo = static_cast<double>(b) * width;
    out[b].hi = b + 1 == bins ? kDecayRange : static_cast<double>(b + 1) * width;
    out[b].count = counts[b];
    if (counts[b]) out[b].mean_v = sums[b] / static_cast<double>(counts[b]);
  }
  return out;
}

double violation_rate(const Scorer& scorer, std::span<const HiddenRecord> records,
                      double tolerance) {
  const auto values = series_values(scorer, records);
  std::size_t pairs = 0, rises = 0;
  for (const auto& v : values) {
    for (std::size_t k = 1; k < v.size(); ++k) {
      ++pairs;
      if (v[k] - v[k - 1] > tolerance) ++rises;
    }
  }
  return static_cast<double>(rises) / static_cast<double>(pairs);
}

bool is_non_increasing(std::span<const DecayBin> curve, double tolerance) {
  std::optional<double> prev;
  for (const auto& b : curve) {
    if (!b.mean_v) continue;
    if (prev && *b.mean_v > *prev + tolerance) return false;
    prev = b.mean_v;
  }
  return true;
}

EvalReport evaluate(const Scorer& scorer, std::span<const HiddenRecord> records,
                    std::size_t bins) {
  EvalReport report;
  for (const auto& r : records) (r.label ? report.positives : report.negatives) += 1;
  report.auprc = score_auprc(scorer, records);
  const bool any_series = std::any_of(records.begin(), records.end(),
                                      [](const HiddenRecord& r) { return !r.series.empty(); });
  if (any_series) {
    report.decay = decay_curve(scorer, records, bins);
    report.violation_rate = violation_rate(scorer, records);
  }
  return report;
}

// ---------------------------------------------------------------------------
// report emission

std::string format_real(double value) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

namespace {

std::string opt_real(const std::optional<double>& v) { return v ? format_real(*v) : "NA"; }

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string summary_csv(const EvalReport& report) {
  std::string s = "metric,value\n";
  s += "auprc," + opt_real(report.auprc) + "\n";
  s += "violation_rate," + opt_real(report.violation_rate) + "\n";
  s += "positives," + std::to_string(report.positives) + "\n";
  s += "negatives," + std::to_string(report.negatives) + "\n";
  s += "records," + std::to_string(report.positives + report.negatives) + "\n";
  return s;
}

std::string decay_csv(std::span<const DecayBin> curve) {
  std::string s = "bin_lo,bin_hi,mean_v,count\n";
  for (const auto& b : curve) {
    s += format_real(b.lo) + "," + format_real(b.hi) + "," + opt_real(b.mean_v) + "," +
         std::to_string(b.count) + "\n";
  }
  return s;
}

std::string format_layers(std::span<const std::size_t> layers) {
  std::string s;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) s += ' ';
    s += std::to_string(layers[i]);
  }
  return s;
}

std::string per_layer_csv(std::span<const LayerScore> scores) {
  std::string s = "layers,auprc\n";
  for (const auto& l : scores) s += format_layers(l.layers) + "," + opt_real(l.auprc) + "\n";
  return s;
}

std::string decay_svg(std::span<const NamedCurve> curves) {
  constexpr double kW = 640, kH = 400, kLeft = 60, kRight = 20, kTop = 20, kBottom = 50;
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  auto x_of = [&](double delta) { return kLeft + pw * std::clamp(delta, 0.0, 1.0); };
  auto y_of = [&](double v) { return kTop + ph * (1.0 - std::clamp(v, 0.0, 1.0)); };
  static constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
     << "\" viewBox=\"0 0 " << kW << ' ' << kH << "\">\n"
     << "<rect x=\"0\" y=\"0\" width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n"
     << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + ph << "\" x2=\"" << kLeft + pw << "\" y2=\""
     << kTop + ph << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\""
     << kTop + ph << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 10; i += 2) {
    const double t = i / 10.0;
    os << "<text x=\"" << x_of(t) << "\" y=\"" << kTop + ph + 16
       << "\" font-size=\"11\" text-anchor=\"middle\">" << t << "</text>\n"
       << "<text x=\"" << kLeft - 6 << "\" y=\"" << y_of(t) + 4
       << "\" font-size=\"11\" text-anchor=\"end\">" << t << "</text>\n";
  }
  os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kH - 10
     << "\" font-size=\"13\" text-anchor=\"middle\">&#948; (perturbation magnitude)</text>\n"
     << "<text x=\"16\" y=\"" << kTop + ph / 2 << "\" font-size=\"13\" text-anchor=\"middle\" "
     << "transform=\"rotate(-90 16 " << kTop + ph / 2 << ")\">mean V</text>\n";
  for (std::size_t c = 0; c < curves.size(); ++c) {
    const char* color = kColors[c % std::size(kColors)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    bool first = true;
    for (const auto& b : curves[c].bins) {
      if (!b.mean_v) continue;
      if (!first) os << ' ';
      os << x_of((b.lo + b.hi) / 2) << ',' << y_of(*b.mean_v);
      first = false;
    }
    os << "\"/>\n";
    os << "<text x=\"" << kLeft + pw - 4 << "\" y=\"" << kTop + 16 + 16 * static_cast<double>(c)
       << "\" font-size=\"12\" text-anchor=\"end\" fill=\"" << color << "\">"
       << xml_escape(curves[c].label) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void emit_report(const EvalReport& report, const std::filesystem::path& dir,
                 ReportFormats formats) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create report directory '" + dir.string() + "': " + ec.message());
  if (formats.csv) {
    write_text(dir / "summary.csv", summary_csv(report));
    write_text(dir / "decay_curve.csv", decay_csv(report.decay));
    write_text(dir / "per_layer.csv", per_layer_csv(report.per_layer));
  }
  if (formats.svg) {
    const NamedCurve curve{"probe", report.decay};
    write_text(dir / "decay_curve.svg", decay_svg(std::span(&curve, 1)));
  }
}

}  // namespace lyaprobe
