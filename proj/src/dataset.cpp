#include "lyaprobe/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "lyaprobe/binio.hpp"
#include "lyaprobe/error.hpp"
#include "lyaprobe/random.hpp"

namespace lyaprobe {

std::string_view to_string(Region region) {
  switch (region) {
    case Region::NotApplicable: return "N/A";
    case Region::StableKnown: return "S_K";
    case Region::StableUnknown: return "S_U";
    case Region::Boundary: return "B";
  }
  return "?";
}

namespace {

void check_states(const LayerStates& s, std::size_t layers, std::size_t dim, std::uint64_t id) {
  if (s.size() != layers) {
    throw ContractError("record " + std::to_string(id) + ": " + std::to_string(s.size()) +
                        " layers, expected " + std::to_string(layers));
  }
  for (const auto& v : s) {
    if (v.size() != dim) {
      throw ContractError("record " + std::to_string(id) + ": layer width " +
                          std::to_string(v.size()) + ", expected " + std::to_string(dim));
    }
  }
}

std::string encode_manifest(const Manifest& manifest) {
  std::string out;
  for (const auto& [key, value] : manifest) {
    if (key.empty() || key.find_first_of("=\n") != std::string::npos ||
        value.find('\n') != std::string::npos) {
      throw ContractError("manifest entry '" + key + "' contains a reserved character");
    }
    out += key;
    out += '=';
    out += value;
    out += '\n';
  }
  return out;
}

Manifest decode_manifest(const std::string& text) {
  Manifest m;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw MalformedError("dump manifest: malformed line '" + line + "'");
    }
    m[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return m;
}

void put_states(binio::Writer& w, const LayerStates& s) {
  for (const auto& v : s) {
    for (double x : v) w.put<float>(static_cast<float>(x));
  }
}

LayerStates get_states(binio::Reader& r, std::size_t layers, std::size_t dim) {
  r.need(layers * dim * sizeof(float));
  LayerStates s(layers, std::vector<double>(dim));
  for (auto& v : s) {
    for (double& x : v) {
      const float f = r.get<float>();
      if (!std::isfinite(f)) throw MalformedError("dump: non-finite hidden-state value");
      x = static_cast<double>(f);
    }
  }
  return s;
}

}  // namespace

void Dataset::validate() const {
  for (const auto& r : records) {
    if (r.label > 1) throw ContractError("record " + std::to_string(r.id) + ": label must be 0/1");
    check_states(r.states, layer_count, hidden_dim, r.id);
    for (const auto& e : r.series.entries) check_states(e.states, layer_count, hidden_dim, r.id);
    r.series.validate();
  }
}

std::vector<std::uint8_t> encode_dump(const Dataset& dataset) {
  dataset.validate();
  binio::Writer w;
  w.bytes(kDumpMagic, 4);
  w.put<std::uint32_t>(kDumpVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dataset.layer_count));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dataset.hidden_dim));
  w.put<std::uint64_t>(dataset.records.size());
  const std::string manifest = encode_manifest(dataset.manifest);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(manifest.size()));
  w.str(manifest);
  for (const auto& r : dataset.records) {
    if (r.series.size() > UINT16_MAX) {
      throw ContractError("record " + std::to_string(r.id) + ": series longer than 65535");
    }
    w.put<std::uint64_t>(r.id);
    w.put<std::uint8_t>(r.label);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(r.region));
    w.put<std::uint16_t>(static_cast<std::uint16_t>(r.series.size()));
    put_states(w, r.states);
    float prev = 0.0f;
    for (const auto& e : r.series.entries) {
      const auto d = static_cast<float>(e.delta);
      if (!(d > prev)) {
        throw ContractError("record " + std::to_string(r.id) +
                            ": series deltas collapse at 32-bit precision");
      }
      prev = d;
      w.put<float>(d);
      put_states(w, e.states);
    }
  }
  w.seal();
  return w.buffer();
}

Dataset decode_dump(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) {
    throw TruncatedError("dump: " + std::to_string(bytes.size()) +
                         " bytes is too short to hold a header");
  }
  if (std::memcmp(bytes.data(), kDumpMagic, 4) != 0) {
    throw BadMagicError("dump: bad magic, not an LYPD file");
  }
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, sizeof(version));
  if (version != kDumpVersion) {
    throw VersionError("dump: unsupported version " + std::to_string(version) +
                       " (supported: " + std::to_string(kDumpVersion) + ")");
  }
  const auto payload = binio::verify_sealed(bytes, kDumpFixedBytes, "dump");

  binio::Reader r(payload);
  r.skip(8);
  Dataset ds;
  ds.layer_count = r.get<std::uint32_t>();
  ds.hidden_dim = r.get<std::uint32_t>();
  const auto count = r.get<std::uint64_t>();
  const auto manifest_len = r.get<std::uint32_t>();
  ds.manifest = decode_manifest(r.str(manifest_len));

  SeriesKind kind = SeriesKind::Representational;
  if (auto it = ds.manifest.find("series_kind"); it != ds.manifest.end()) {
    try {
      kind = series_kind_from_string(it->second);
    } catch (const ConfigError& e) {
      throw MalformedError(std::string("dump manifest: ") + e.what());
    }
  }

  if (ds.hidden_dim != 0 && ds.layer_count > payload.size() / ds.hidden_dim) {
    throw MalformedError("dump: layer_count x hidden_dim exceeds the payload size");
  }
  const std::size_t state_bytes = ds.layer_count * ds.hidden_dim * sizeof(float);
  const std::size_t min_record = 12 + state_bytes;
  if (count > r.remaining() / min_record) {
    throw MalformedError("dump: record count " + std::to_string(count) +
                         " exceeds what the payload can hold");
  }
  ds.records.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    HiddenRecord rec;
    rec.id = r.get<std::uint64_t>();
    rec.label = r.get<std::uint8_t>();
    if (rec.label > 1) {
      throw MalformedError("dump: record " + std::to_string(rec.id) + " has label " +
                           std::to_string(rec.label));
    }
    const auto region = r.get<std::uint8_t>();
    if (region > static_cast<std::uint8_t>(Region::Boundary)) {
      throw MalformedError("dump: record " + std::to_string(rec.id) + " has region byte " +
                           std::to_string(region));
    }
    rec.region = static_cast<Region>(region);
    const auto k = r.get<std::uint16_t>();
    rec.states = get_states(r, ds.layer_count, ds.hidden_dim);
    rec.series.kind = kind;
    rec.series.entries.reserve(k);
    double prev = 0.0;
    for (std::uint16_t j = 0; j < k; ++j) {
      const double d = r.get<float>();
      if (!(d > prev) || d > 2.0) {
        throw NonIncreasingDeltaError("dump: record " + std::to_string(rec.id) + " delta[" +
                                      std::to_string(j) + "] = " + std::to_string(d) +
                                      " is not strictly increasing within (0, 2]");
      }
      prev = d;
      rec.series.entries.push_back({d, get_states(r, ds.layer_count, ds.hidden_dim)});
    }
    ds.records.push_back(std::move(rec));
  }
  if (r.remaining() != 0) {
    throw MalformedError("dump: " + std::to_string(r.remaining()) +
                         " unexpected bytes after the last record");
  }
  return ds;
}

void write_dump(const Dataset& dataset, const std::filesystem::path& path) {
  binio::write_file(path, encode_dump(dataset));
}

Dataset read_dump(const std::filesystem::path& path) { return decode_dump(binio::read_file(path)); }

void quantize_to_storage(Dataset& dataset) {
  auto q = [](LayerStates& s) {
    for (auto& v : s)
      for (double& x : v) x = static_cast<float>(x);
  };
  for (auto& r : dataset.records) {
    q(r.states);
    for (auto& e : r.series.entries) {
      e.delta = static_cast<float>(e.delta);
      q(e.states);
    }
  }
}

// ---------------------------------------------------------------------------

SplitResult split(std::span<const HiddenRecord> records, double train_fraction,
                  std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("split: train_fraction must lie in (0, 1), got " +
                      std::to_string(train_fraction));
  }
  std::map<std::pair<int, int>, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < records.size(); ++i) {
    strata[{records[i].label, static_cast<int>(records[i].region)}].push_back(i);
  }

  SplitResult out;
  std::vector<bool> to_train(records.size(), false);
  struct Quota {
    std::vector<std::size_t>* members;
    std::size_t take;
    double remainder;
    std::size_t order;
  };
  std::vector<Quota> quotas;
  std::size_t eligible = 0;
  std::size_t order = 0;
  for (auto& [key, members] : strata) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(key.first) * 256 + key.second));
    rng.shuffle(std::span<std::size_t>(members));
    if (members.size() < 2) {
      out.warnings.push_back("degenerate split: stratum (label=" + std::to_string(key.first) +
                             ", region=" +
                             std::string(to_string(static_cast<Region>(key.second))) + ") has " +
                             std::to_string(members.size()) + " member(s); assigned to train");
      for (auto i : members) to_train[i] = true;
      continue;
    }
    eligible += members.size();
    const double exact = train_fraction * static_cast<double>(members.size());
    const auto whole = static_cast<std::size_t>(std::floor(exact));
    quotas.push_back({&members, whole, exact - static_cast<double>(whole), order++});
  }
  // Largest-remainder allocation so the eligible total is round(f * n).
  const auto target = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(eligible)));
  std::size_t assigned = 0;
  for (const auto& q : quotas) assigned += q.take;
  std::vector<Quota*> by_remainder;
  for (auto& q : quotas) by_remainder.push_back(&q);
  std::stable_sort(by_remainder.begin(), by_remainder.end(),
                   [](const Quota* a, const Quota* b) { return a->remainder > b->remainder; });
  for (std::size_t i = 0; assigned < target && i < by_remainder.size(); ++i) {
    if (by_remainder[i]->take < by_remainder[i]->members->size()) {
      by_remainder[i]->take += 1;
      assigned += 1;
    }
  }
  for (const auto& q : quotas) {
    for (std::size_t j = 0; j < q.take; ++j) to_train[(*q.members)[j]] = true;
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    (to_train[i] ? out.train : out.validation).push_back(records[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------

NormStats NormStats::identity(std::size_t layer_count, std::size_t hidden_dim) {
  NormStats s;
  s.layer_count = layer_count;
  s.hidden_dim = hidden_dim;
  s.mean.assign(layer_count * hidden_dim, 0.0);
  s.stddev.assign(layer_count * hidden_dim, 1.0);
  return s;
}

void NormStats::apply(LayerStates& states) const {
  if (states.size() != layer_count) {
    throw DimensionError("normalize: " + std::to_string(states.size()) +
                         " layers, stats fitted on " + std::to_string(layer_count));
  }
  for (std::size_t l = 0; l < layer_count; ++l) {
    if (states[l].size() != hidden_dim) {
      throw DimensionError("normalize: layer width " + std::to_string(states[l].size()) +
                           ", stats fitted on " + std::to_string(hidden_dim));
    }
    for (std::size_t j = 0; j < hidden_dim; ++j) {
      const std::size_t k = l * hidden_dim + j;
      states[l][j] = (states[l][j] - mean[k]) / stddev[k];
    }
  }
}

NormStats normalize_fit(std::span<const HiddenRecord> train) {
  if (train.empty()) throw ContractError("normalize_fit: empty training split");
  const std::size_t layers = train[0].states.size();
  const std::size_t dim = layers ? train[0].states[0].size() : 0;
  NormStats s = NormStats::identity(layers, dim);
  std::fill(s.stddev.begin(), s.stddev.end(), 0.0);
  for (const auto& r : train) {
    check_states(r.states, layers, dim, r.id);
    for (std::size_t l = 0; l < layers; ++l)
      for (std::size_t j = 0; j < dim; ++j) s.mean[l * dim + j] += r.states[l][j];
  }
  const double n = static_cast<double>(train.size());
  for (double& m : s.mean) m /= n;
  for (const auto& r : train) {
    for (std::size_t l = 0; l < layers; ++l) {
      for (std::size_t j = 0; j < dim; ++j) {
        const double d = r.states[l][j] - s.mean[l * dim + j];
        s.stddev[l * dim + j] += d * d;
      }
    }
  }
  for (double& v : s.stddev) v = std::max(std::sqrt(v / n), kStdFloor);
  return s;
}

std::vector<HiddenRecord> normalize_apply(std::span<const HiddenRecord> records,
                                          const NormStats& stats) {
  std::vector<HiddenRecord> out(records.begin(), records.end());
  for (auto& r : out) {
    stats.apply(r.states);
    for (auto& e : r.series.entries) stats.apply(e.states);
  }
  return out;
}

std::vector<HiddenRecord> select_layers(std::span<const HiddenRecord> records,
                                        std::span<const std::size_t> layers) {
  if (layers.empty()) throw ConfigError("select_layers: empty layer subset");
  auto pick = [&](const LayerStates& s) {
    LayerStates out;
    out.reserve(layers.size());
    for (auto l : layers) {
      if (l >= s.size()) {
        throw ConfigError("select_layers: layer index " + std::to_string(l) +
                          " out of range (records have " + std::to_string(s.size()) + ")");
      }
      out.push_back(s[l]);
    }
    return out;
  };
  std::vector<HiddenRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    HiddenRecord c;
    c.id = r.id;
    c.label = r.label;
    c.region = r.region;
    c.states = pick(r.states);
    c.series.kind = r.series.kind;
    for (const auto& e : r.series.entries) c.series.entries.push_back({e.delta, pick(e.states)});
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace lyaprobe
