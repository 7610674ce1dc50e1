#include "lyaprobe/kvconfig.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <set>

#include "lyaprobe/binio.hpp"
#include "lyaprobe/error.hpp"

namespace lyaprobe {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(const std::string& key, std::string_view expected,
                            const std::string& value) {
  throw ConfigError("config key '" + key + "': expected " + std::string(expected) + ", got '" +
                    value + "'");
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    bad_value(key, "a non-negative integer", value);
  }
  return out;
}

std::size_t to_size(const std::string& key, const std::string& value) {
  return static_cast<std::size_t>(to_u64(key, value));
}

double to_real(const std::string& key, const std::string& value) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    bad_value(key, "a real number", value);
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, "true or false", value);
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::string_view rest = value;
  while (true) {
    const auto comma = rest.find(',');
    out.emplace_back(trim(rest.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    rest = rest.substr(comma + 1);
  }
  return out;
}

}  // namespace

std::vector<std::size_t> parse_index_list(const std::string& key, const std::string& value) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(value)) {
    if (item.empty()) bad_value(key, "a comma-separated list of integers", value);
    out.push_back(to_size(key, item));
  }
  return out;
}

namespace {

using Setter = std::function<void(const std::string& key, const std::string& value)>;

void apply(const KvEntries& entries, const std::map<std::string, Setter>& setters) {
  for (const auto& [key, value] : entries) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(key, value);
  }
}

}  // namespace

KvEntries parse_kv(std::string_view text) {
  KvEntries out;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    const std::string_view raw = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    const std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value', got '" +
                        std::string(line) + "'");
    }
    std::string key(trim(line.substr(0, eq)));
    std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) {
      throw ConfigError("config line " + std::to_string(line_no) + ": missing key");
    }
    if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' given twice");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

KvEntries read_kv(const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path);
  return parse_kv(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

void apply_world_config(const KvEntries& entries, WorldConfig& c) {
  const std::map<std::string, Setter> setters = {
      {"latent_dim", [&](auto& k, auto& v) { c.latent_dim = to_size(k, v); }},
      {"clusters_known", [&](auto& k, auto& v) { c.clusters_known = to_size(k, v); }},
      {"clusters_unknown", [&](auto& k, auto& v) { c.clusters_unknown = to_size(k, v); }},
      {"boundary_width", [&](auto& k, auto& v) { c.boundary_width = to_real(k, v); }},
      {"stability_eps", [&](auto& k, auto& v) { c.stability_eps = to_real(k, v); }},
      {"num_layers", [&](auto& k, auto& v) { c.num_layers = to_size(k, v); }},
      {"hidden_dim", [&](auto& k, auto& v) { c.hidden_dim = to_size(k, v); }},
      {"records", [&](auto& k, auto& v) { c.records = to_size(k, v); }},
      {"region_fractions",
       [&](auto& k, auto& v) {
         const auto items = split_list(v);
         if (items.size() != 3) bad_value(k, "three comma-separated fractions", v);
         for (std::size_t i = 0; i < 3; ++i) c.region_fractions[i] = to_real(k, items[i]);
       }},
      {"label_noise", [&](auto& k, auto& v) { c.label_noise = to_real(k, v); }},
      {"seed", [&](auto& k, auto& v) { c.seed = to_u64(k, v); }},
      {"frontier_steepness", [&](auto& k, auto& v) { c.frontier_steepness = to_real(k, v); }},
      {"feature_gain", [&](auto& k, auto& v) { c.feature_gain = to_real(k, v); }},
      {"series_length", [&](auto& k, auto& v) { c.series_length = to_size(k, v); }},
      {"series_scheme",
       [&](auto& k, auto& v) {
         try {
           c.series_scheme = series_scheme_from_string(v);
         } catch (const ConfigError&) {
           bad_value(k, "delta_targets or sigma_grid", v);
         }
       }},
      {"sigma_min", [&](auto& k, auto& v) { c.sigma_min = to_real(k, v); }},
      {"sigma_max", [&](auto& k, auto& v) { c.sigma_max = to_real(k, v); }},
  };
  apply(entries, setters);
}

void apply_run_config(const KvEntries& entries, RunConfig& c) {
  auto& p = c.probe;
  auto& t = c.train;
  const std::map<std::string, Setter> setters = {
      {"probe_dim", [&](auto& k, auto& v) { p.probe_dim = to_size(k, v); }},
      {"attention_heads", [&](auto& k, auto& v) { p.attention_heads = to_size(k, v); }},
      {"classifier_widths",
       [&](auto& k, auto& v) {
         const auto w = parse_index_list(k, v);
         if (w.size() != 3) bad_value(k, "three comma-separated widths", v);
         std::copy(w.begin(), w.end(), p.classifier_widths.begin());
       }},
      {"layers", [&](auto& k, auto& v) { c.layers = parse_index_list(k, v); }},
      {"train_fraction", [&](auto& k, auto& v) { c.train_fraction = to_real(k, v); }},
      {"bins", [&](auto& k, auto& v) { c.bins = to_size(k, v); }},
      {"epochs_stage1", [&](auto& k, auto& v) { t.epochs_stage1 = to_size(k, v); }},
      {"epochs_stage2", [&](auto& k, auto& v) { t.epochs_stage2 = to_size(k, v); }},
      {"warmup_epochs", [&](auto& k, auto& v) { t.warmup_epochs = to_size(k, v); }},
      {"lambda_max", [&](auto& k, auto& v) { t.lambda_max = to_real(k, v); }},
      {"batch_size", [&](auto& k, auto& v) { t.batch_size = to_size(k, v); }},
      {"learning_rate", [&](auto& k, auto& v) { t.learning_rate = to_real(k, v); }},
      {"lyapunov_mode",
       [&](auto& k, auto& v) {
         try {
           t.lyapunov_mode = lyapunov_mode_from_string(v);
         } catch (const ConfigError&) {
           bad_value(k, "pairwise_hinge or input_derivative", v);
         }
       }},
      {"seed",
       [&](auto& k, auto& v) {
         t.seed = to_u64(k, v);
         p.seed = t.seed;
       }},
      {"regenerate_series", [&](auto& k, auto& v) { t.regenerate_series = to_bool(k, v); }},
      {"regen_series_length", [&](auto& k, auto& v) { t.regen_series_length = to_size(k, v); }},
      {"regen_sigma_min", [&](auto& k, auto& v) { t.regen_sigma_min = to_real(k, v); }},
      {"regen_sigma_max", [&](auto& k, auto& v) { t.regen_sigma_max = to_real(k, v); }},
      {"derivative_step", [&](auto& k, auto& v) { t.derivative_step = to_real(k, v); }},
  };
  apply(entries, setters);
}

}  // namespace lyaprobe
