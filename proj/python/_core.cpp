#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "../tools/cli.hpp"
#include "lyaprobe/dataset.hpp"
#include "lyaprobe/error.hpp"
#include "lyaprobe/evaluation.hpp"
#include "lyaprobe/kvconfig.hpp"
#include "lyaprobe/perturbation.hpp"
#include "lyaprobe/probe.hpp"
#include "lyaprobe/synthworld.hpp"

namespace py = pybind11;
using namespace lyaprobe;

namespace {

KvEntries to_entries(const py::dict& options) {
  KvEntries out;
  for (const auto& [k, v] : options) {
    std::string value;
    if (py::isinstance<py::bool_>(v)) {
      value = v.cast<bool>() ? "true" : "false";
    } else if (py::isinstance<py::list>(v) || py::isinstance<py::tuple>(v)) {
      for (const auto& item : v) {
        if (!value.empty()) value += ',';
        value += py::str(item).cast<std::string>();
      }
    } else {
      value = py::str(v).cast<std::string>();
    }
    out.emplace_back(py::str(k).cast<std::string>(), value);
  }
  return out;
}

py::dict record_dict(const HiddenRecord& r) {
  py::dict d;
  d["id"] = r.id;
  d["label"] = r.label;
  d["region"] = std::string(to_string(r.region));
  d["states"] = r.states;
  py::list series;
  for (const auto& e : r.series.entries) series.append(py::make_tuple(e.delta, e.states));
  d["series"] = series;
  return d;
}

py::dict dataset_dict(const Dataset& ds) {
  py::dict d;
  d["layer_count"] = ds.layer_count;
  d["hidden_dim"] = ds.hidden_dim;
  d["manifest"] = ds.manifest;
  py::list records;
  for (const auto& r : ds.records) records.append(record_dict(r));
  d["records"] = records;
  return d;
}

// Checkpoint plus a cached scorer; states are raw, normalization is applied inside.
class Probe {
 public:
  explicit Probe(const std::filesystem::path& path)
      : checkpoint_(load_probe(path)), scorer_(probe_scorer(checkpoint_)) {}

  std::vector<double> score(const std::vector<LayerStates>& states,
                            const std::vector<double>& deltas) const {
    if (states.size() != deltas.size()) throw DimensionError("score: states and deltas differ in length");
    std::vector<Query> qs;
    for (std::size_t i = 0; i < states.size(); ++i) qs.push_back({&states[i], deltas[i]});
    return scorer_(qs);
  }

  py::dict config() const {
    const auto& c = checkpoint_.config;
    py::dict d;
    d["num_layers"] = c.num_layers;
    d["hidden_dim"] = c.hidden_dim;
    d["probe_dim"] = c.probe_dim;
    d["attention_heads"] = c.attention_heads;
    d["classifier_widths"] = std::vector<std::size_t>(c.classifier_widths.begin(),
                                                      c.classifier_widths.end());
    d["seed"] = c.seed;
    return d;
  }

 private:
  Checkpoint checkpoint_;
  Scorer scorer_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the lyaprobe C++ core";

  // Later registrations are tried first, so bases precede subclasses.
  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  auto format = py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<DegenerateInputError>(m, "DegenerateInputError", base.ptr());
  py::register_exception<NumericalError>(m, "NumericalError", base.ptr());
  py::register_exception<UndefinedMetricError>(m, "UndefinedMetricError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<ChecksumError>(m, "ChecksumError", format.ptr());
  py::register_exception<TruncatedError>(m, "TruncatedError", format.ptr());
  py::register_exception<VersionError>(m, "VersionError", format.ptr());
  py::register_exception<BadMagicError>(m, "BadMagicError", format.ptr());

  m.def("auprc", [](const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
    return auprc(scores, labels);
  }, py::arg("scores"), py::arg("labels"), "Average precision with grouped ties.");

  m.def("delta_of",
        [](const std::vector<double>& h, const std::vector<double>& h_pert) {
          return delta_of(h, h_pert);
        },
        py::arg("h"), py::arg("h_pert"), "1 - cos(h, h_pert), clamped to [0, 2].");

  m.def("synth",
        [](const std::filesystem::path& out, const py::dict& options) {
          WorldConfig wc;
          apply_world_config(to_entries(options), wc);
          wc.validate();
          write_dump(synth_dataset(wc), out);
        },
        py::arg("out"), py::arg("options") = py::dict(),
        "Write a synthetic LYPD dump; options use the world config keys.");

  m.def("read_dump", [](const std::filesystem::path& path) { return dataset_dict(read_dump(path)); },
        py::arg("path"), "Parse an LYPD dump into plain Python containers.");

  m.def("run_cli",
        [](const std::vector<std::string>& args) {
          std::ostringstream out, err;
          const int code = cli::run(args, out, err);
          return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Run one CLI command in-process; returns (exit_code, stdout, stderr).");

  py::class_<Probe>(m, "Probe")
      .def(py::init<const std::filesystem::path&>(), py::arg("path"))
      .def("score", &Probe::score, py::arg("states"), py::arg("deltas"),
           "V for each (raw layer states, delta) pair.")
      .def_property_readonly("config", &Probe::config);
}
