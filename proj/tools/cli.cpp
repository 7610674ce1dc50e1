#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <map>
#include <ostream>
#include <sstream>

#include "lyaprobe/binio.hpp"
#include "lyaprobe/dataset.hpp"
#include "lyaprobe/error.hpp"
#include "lyaprobe/evaluation.hpp"
#include "lyaprobe/kvconfig.hpp"
#include "lyaprobe/probe.hpp"
#include "lyaprobe/synthworld.hpp"
#include "lyaprobe/training.hpp"

namespace lyaprobe::cli {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string out;
  std::string out_dir;
  std::string data;
  std::string checkpoint;
  std::string baseline;
  std::string config;
  std::string split = "all";
  std::string subsets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> bins;
  std::optional<double> train_fraction;
  std::optional<std::size_t> threads;
  bool svg = false;
};

void write_text(const fs::path& path, const std::string& text) {
  binio::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

std::size_t thread_count(const Options& o) {
  if (o.threads) return std::max<std::size_t>(1, *o.threads);
  if (const char* env = std::getenv("LYAPROBE_THREADS")) {
    std::size_t n = 0;
    const std::string_view text(env);
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), n);
    if (ec != std::errc() || ptr != text.data() + text.size() || n == 0) {
      throw ConfigError("LYAPROBE_THREADS must be a positive integer, got '" + std::string(text) +
                        "'");
    }
    return n;
  }
  return 1;
}

RunConfig run_config(const Options& o) {
  RunConfig rc;
  if (!o.config.empty()) apply_run_config(read_kv(o.config), rc);
  if (o.seed) {
    rc.train.seed = *o.seed;
    rc.probe.seed = *o.seed;
  }
  if (o.train_fraction) rc.train_fraction = *o.train_fraction;
  if (o.bins) rc.bins = *o.bins;
  if (!(rc.train_fraction > 0.0 && rc.train_fraction < 1.0)) {
    throw ConfigError("train_fraction must lie strictly between 0 and 1");
  }
  if (rc.bins == 0) throw ConfigError("bins must be positive");
  rc.train.validate();
  return rc;
}

// Loads a dump and restricts it to the configured layers.
Dataset load_data(const Options& o, const RunConfig& rc) {
  if (o.data.empty()) throw ConfigError("--data is required");
  Dataset ds = read_dump(o.data);
  if (!rc.layers.empty()) {
    for (std::size_t l : rc.layers) {
      if (l >= ds.layer_count) {
        throw ConfigError("config key 'layers': index " + std::to_string(l) + " out of range for " +
                          std::to_string(ds.layer_count) + " stored layers");
      }
    }
    ds.records = select_layers(ds.records, rc.layers);
    ds.layer_count = rc.layers.size();
  }
  return ds;
}

std::vector<HiddenRecord> eval_records(const Dataset& ds, const RunConfig& rc, const Options& o,
                                       std::ostream& err) {
  if (o.split == "all") return ds.records;
  if (o.split != "validation" && o.split != "train") {
    throw ConfigError("--split must be all, train or validation");
  }
  auto parts = split(ds.records, rc.train_fraction, rc.train.seed);
  for (const auto& w : parts.warnings) err << "warning: " << w << '\n';
  return o.split == "train" ? std::move(parts.train) : std::move(parts.validation);
}

void check_checkpoint_fits(const Checkpoint& ck, const Dataset& ds) {
  if (ck.config.num_layers != ds.layer_count || ck.config.hidden_dim != ds.hidden_dim) {
    std::ostringstream os;
    os << "checkpoint expects " << ck.config.num_layers << " layers of width "
       << ck.config.hidden_dim << " but the data has " << ds.layer_count << " of width "
       << ds.hidden_dim << " (set 'layers' in --config to select stored layers)";
    throw DimensionError(os.str());
  }
}

std::string opt(const std::optional<double>& v) { return v ? format_real(*v) : "NA"; }

int cmd_synth(const Options& o, std::ostream& out, std::ostream&) {
  WorldConfig wc;
  if (!o.config.empty()) apply_world_config(read_kv(o.config), wc);
  if (o.seed) wc.seed = *o.seed;
  wc.validate();
  const Dataset ds = synth_dataset(wc);
  write_dump(ds, o.out);

  std::map<Region, std::size_t> regions;
  std::size_t positives = 0;
  for (const auto& r : ds.records) {
    ++regions[r.region];
    positives += r.label;
  }
  out << "records," << ds.records.size() << '\n';
  for (const auto& [region, n] : regions) out << "region_" << to_string(region) << ',' << n << '\n';
  out << "label_1," << positives << '\n';
  out << "label_0," << ds.records.size() - positives << '\n';
  return kOk;
}

ProbeConfig probe_config_for(const RunConfig& rc, const Dataset& ds) {
  ProbeConfig pc = rc.probe;
  pc.num_layers = ds.layer_count;
  pc.hidden_dim = ds.hidden_dim;
  pc.validate();
  return pc;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig rc = run_config(o);
  const Dataset ds = load_data(o, rc);
  const ProbeConfig pc = probe_config_for(rc, ds);
  auto parts = split(ds.records, rc.train_fraction, rc.train.seed);
  for (const auto& w : parts.warnings) err << "warning: " << w << '\n';

  const TrainResult result = train(parts.train, parts.validation, pc, rc.train);
  for (const auto& w : result.warnings) err << "warning: " << w << '\n';
  for (const auto& e : result.log.epochs) {
    err << "epoch " << e.epoch << " stage " << e.stage << " lambda " << e.lambda << " bce "
        << e.bce << " lyapunov " << (e.lyapunov ? std::to_string(*e.lyapunov) : "NA")
        << " val_auprc " << (e.val_auprc ? std::to_string(*e.val_auprc) : "NA") << '\n';
  }

  const fs::path dir(o.out_dir);
  ensure_dir(dir);
  save_probe(result.checkpoint(pc), dir / "probe.lypr");
  write_text(dir / "train_log.csv", result.log.to_csv());
  out << "train_records," << parts.train.size() << '\n';
  out << "validation_records," << parts.validation.size() << '\n';
  out << "final_val_auprc," << opt(result.log.epochs.back().val_auprc) << '\n';
  return kOk;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig rc = run_config(o);
  const Dataset ds = load_data(o, rc);
  const Checkpoint ck = load_probe(o.checkpoint);
  check_checkpoint_fits(ck, ds);
  const auto records = eval_records(ds, rc, o, err);
  const auto scorer = probe_scorer(ck, thread_count(o));

  EvalReport report;
  report.auprc = score_auprc(scorer, records);
  for (const auto& r : records) (r.label ? report.positives : report.negatives) += 1;
  const bool has_series = std::any_of(records.begin(), records.end(),
                                      [](const HiddenRecord& r) { return !r.series.empty(); });
  if (has_series) {
    report.decay = decay_curve(scorer, records, rc.bins);
    report.violation_rate = violation_rate(scorer, records);
  } else {
    err << "warning: records carry no perturbation series; decay curve left empty\n";
  }
  emit_report(report, o.out_dir, {true, o.svg});
  out << summary_csv(report);
  if (!report.auprc) {
    err << "error: AUPRC is undefined because the evaluated records have no positive labels\n";
    return kUndefinedMetricExit;
  }
  return kOk;
}

int cmd_verify_stability(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig rc = run_config(o);
  const Dataset ds = load_data(o, rc);
  const auto records = eval_records(ds, rc, o, err);

  struct Entry {
    std::string label;
    std::string path;
  };
  std::vector<Entry> entries{{"probe", o.checkpoint}};
  if (!o.baseline.empty()) entries.push_back({"baseline", o.baseline});

  const fs::path dir(o.out_dir);
  ensure_dir(dir);
  std::ostringstream summary;
  summary << "metric,value\n";
  std::vector<NamedCurve> curves;
  for (const auto& e : entries) {
    const Checkpoint ck = load_probe(e.path);
    check_checkpoint_fits(ck, ds);
    const auto scorer = probe_scorer(ck, thread_count(o));
    auto curve = decay_curve(scorer, records, rc.bins);
    const double rate = violation_rate(scorer, records);
    const bool monotone = is_non_increasing(curve, 0.01);
    const std::string prefix = e.label == "probe" ? "" : e.label + "_";
    write_text(dir / (prefix + "decay_curve.csv"), decay_csv(curve));
    summary << prefix << "violation_rate," << format_real(rate) << '\n';
    summary << prefix << "non_increasing," << (monotone ? 1 : 0) << '\n';
    curves.push_back({e.label, std::move(curve)});
  }
  write_text(dir / "stability.csv", summary.str());
  if (o.svg) write_text(dir / "decay_curve.svg", decay_svg(curves));
  out << summary.str();
  return kOk;
}

std::vector<std::vector<std::size_t>> parse_subsets(const std::string& text,
                                                    std::size_t layer_count) {
  std::vector<std::vector<std::size_t>> subsets;
  if (text.empty()) {
    for (std::size_t l = 0; l < layer_count; ++l) subsets.push_back({l});
    return subsets;
  }
  std::string_view rest = text;
  while (true) {
    const auto semi = rest.find(';');
    const std::string item(rest.substr(0, semi));
    auto layers = parse_index_list("--subsets", item);
    subsets.push_back(std::move(layers));
    if (semi == std::string_view::npos) break;
    rest = rest.substr(semi + 1);
  }
  return subsets;
}

int cmd_ablate(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig rc = run_config(o);
  const Dataset ds = load_data(o, rc);
  const ProbeConfig pc = probe_config_for(rc, ds);
  auto parts = split(ds.records, rc.train_fraction, rc.train.seed);
  for (const auto& w : parts.warnings) err << "warning: " << w << '\n';
  const auto subsets = parse_subsets(o.subsets, ds.layer_count);
  const auto scores = ablate_layers(parts.train, parts.validation, pc, rc.train, subsets);
  const std::string csv = per_layer_csv(scores);
  ensure_dir(o.out_dir);
  write_text(fs::path(o.out_dir) / "per_layer.csv", csv);
  out << csv;
  return kOk;
}

int cmd_inspect(const Options& o, std::ostream& out, std::ostream&) {
  const auto bytes = binio::read_file(o.data);
  if (bytes.size() >= 4 && std::equal(bytes.begin(), bytes.begin() + 4, kCheckpointMagic)) {
    const Checkpoint ck = decode_checkpoint(bytes);
    const auto& c = ck.config;
    out << "format,LYPR\n";
    out << "version," << kCheckpointVersion << '\n';
    out << "num_layers," << c.num_layers << '\n';
    out << "hidden_dim," << c.hidden_dim << '\n';
    out << "probe_dim," << c.probe_dim << '\n';
    out << "attention_heads," << c.attention_heads << '\n';
    out << "classifier_widths," << c.classifier_widths[0] << ' ' << c.classifier_widths[1] << ' '
        << c.classifier_widths[2] << '\n';
    out << "seed," << c.seed << '\n';
    std::size_t count = 0;
    for (const auto& p : ck.params.named()) count += p.tensor.numel();
    out << "parameters," << count << '\n';
    return kOk;
  }

  const Dataset ds = decode_dump(bytes);
  std::map<Region, std::size_t> regions;
  std::size_t positives = 0, with_series = 0, points = 0;
  double dmin = 0.0, dmax = 0.0;
  for (const auto& r : ds.records) {
    ++regions[r.region];
    positives += r.label;
    if (!r.series.empty()) ++with_series;
    for (const auto& e : r.series.entries) {
      dmin = points == 0 ? e.delta : std::min(dmin, e.delta);
      dmax = points == 0 ? e.delta : std::max(dmax, e.delta);
      ++points;
    }
  }
  out << "format,LYPD\n";
  out << "version," << kDumpVersion << '\n';
  out << "layer_count," << ds.layer_count << '\n';
  out << "hidden_dim," << ds.hidden_dim << '\n';
  out << "records," << ds.records.size() << '\n';
  out << "label_1," << positives << '\n';
  out << "label_0," << ds.records.size() - positives << '\n';
  for (const auto& [region, n] : regions) out << "region_" << to_string(region) << ',' << n << '\n';
  out << "records_with_series," << with_series << '\n';
  out << "series_points," << points << '\n';
  if (points > 0) {
    out << "delta_min," << format_real(dmin) << '\n';
    out << "delta_max," << format_real(dmax) << '\n';
  }
  for (const auto& [key, value] : ds.manifest) out << "manifest." << key << ',' << value << '\n';
  return kOk;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const DimensionError*>(&e) ||
      dynamic_cast<const ContractError*>(&e) || dynamic_cast<const DegenerateInputError*>(&e)) {
    return kConfigExit;
  }
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e)) return kIoExit;
  if (dynamic_cast<const NumericalError*>(&e)) return kNumericalExit;
  if (dynamic_cast<const UndefinedMetricError*>(&e)) return kUndefinedMetricExit;
  return kFailure;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Lyapunov stability probes over hidden-state dumps", "lyaprobe"};
  app.require_subcommand(1);
  Options o;

  auto add_seed = [&](CLI::App* c) { c->add_option("--seed", o.seed, "Random seed"); };
  auto add_config = [&](CLI::App* c) {
    c->add_option("--config", o.config, "Flat key = value config file");
  };
  auto add_threads = [&](CLI::App* c) {
    c->add_option("--threads", o.threads, "Scoring threads (default: LYAPROBE_THREADS or 1)");
  };
  auto add_eval_common = [&](CLI::App* c) {
    c->add_option("--data", o.data, "Input LYPD dump")->required();
    c->add_option("--out-dir", o.out_dir, "Output directory")->required();
    c->add_option("--bins", o.bins, "Number of delta bins over [0, 1] (default 10)");
    c->add_option("--split", o.split, "Records to score: all, train or validation")
        ->capture_default_str();
    c->add_option("--train-fraction", o.train_fraction, "Train share used to rebuild the split");
    c->add_flag("--svg", o.svg, "Also write decay_curve.svg");
    add_seed(c);
    add_config(c);
    add_threads(c);
  };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic hidden-state dump");
  synth->add_option("--out", o.out, "Output LYPD path")->required();
  add_config(synth);
  add_seed(synth);

  auto* trn = app.add_subcommand("train", "Train a probe");
  trn->add_option("--data", o.data, "Input LYPD dump")->required();
  trn->add_option("--out-dir", o.out_dir, "Output directory")->required();
  trn->add_option("--train-fraction", o.train_fraction, "Share of records used for training");
  add_config(trn);
  add_seed(trn);

  auto* ev = app.add_subcommand("eval", "Score a checkpoint and write report CSVs");
  ev->add_option("--checkpoint", o.checkpoint, "Probe checkpoint")->required();
  add_eval_common(ev);

  auto* vs = app.add_subcommand("verify-stability", "Decay curve and violation rate");
  vs->add_option("--checkpoint", o.checkpoint, "Probe checkpoint")->required();
  vs->add_option("--baseline", o.baseline, "Optional second checkpoint to compare");
  add_eval_common(vs);

  auto* ab = app.add_subcommand("ablate-layers", "Train one probe per layer subset");
  ab->add_option("--data", o.data, "Input LYPD dump")->required();
  ab->add_option("--out-dir", o.out_dir, "Output directory")->required();
  ab->add_option("--subsets", o.subsets,
                 "Layer subsets such as \"0;1;2;0,2\" (default: each single layer)");
  ab->add_option("--train-fraction", o.train_fraction, "Share of records used for training");
  add_config(ab);
  add_seed(ab);

  auto* ins = app.add_subcommand("inspect", "Validate and summarize a dump or checkpoint");
  ins->add_option("file", o.data, "LYPD dump or LYPR checkpoint")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigExit;
  }

  try {
    if (synth->parsed()) return cmd_synth(o, out, err);
    if (trn->parsed()) return cmd_train(o, out, err);
    if (ev->parsed()) return cmd_eval(o, out, err);
    if (vs->parsed()) return cmd_verify_stability(o, out, err);
    if (ab->parsed()) return cmd_ablate(o, out, err);
    if (ins->parsed()) return cmd_inspect(o, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kFailure;
}

}  // namespace lyaprobe::cli
