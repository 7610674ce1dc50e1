#include "lyaprobe/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "lyaprobe/error.hpp"
#include "lyaprobe/random.hpp"

namespace lyaprobe {

namespace {

// Sub-seed streams.
constexpr std::uint64_t kStreamGeometry = 1;
constexpr std::uint64_t kStreamLayers = 2;
constexpr std::uint64_t kStreamRecords = 3;
constexpr std::uint64_t kStreamSeries = 4;

// Angular spread of boundary samples around the known/unknown axis.
constexpr double kBoundaryJitter = 0.1;

double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

std::vector<double> random_unit(Rng& rng, std::size_t m) {
  std::vector<double> u(m);
  double n2 = 0.0;
  do {
    n2 = 0.0;
    for (double& v : u) {
      v = rng.normal();
      n2 += v * v;
    }
  } while (n2 == 0.0);
  const double inv = 1.0 / std::sqrt(n2);
  for (double& v : u) v *= inv;
  return u;
}

double pair_distance(const WorldConfig& c) { return 2.0 * kCoreRadius + 2.0 * c.boundary_width; }

}  // namespace

void WorldConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("world config: " + key + " " + why);
  };
  if (latent_dim == 0) fail("latent_dim", "must be positive");
  if (clusters_known == 0) fail("clusters_known", "must be positive");
  if (clusters_unknown == 0) fail("clusters_unknown", "must be positive");
  if (num_layers == 0) fail("num_layers", "must be positive");
  if (hidden_dim == 0) fail("hidden_dim", "must be positive");
  if (!(boundary_width > 0.0)) fail("boundary_width", "must be positive");
  if (!(stability_eps > 0.0)) fail("stability_eps", "must be positive");
  if (!(label_noise >= 0.0 && label_noise < 0.5)) fail("label_noise", "must lie in [0, 0.5)");
  if (!(frontier_steepness > 0.0)) fail("frontier_steepness", "must be positive");
  if (!(feature_gain >= 0.0)) fail("feature_gain", "must be >= 0");
  double total = 0.0;
  for (double f : region_fractions) {
    if (!(f >= 0.0)) fail("region_fractions", "must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) fail("region_fractions", "must sum to 1");
  if (!(sigma_min > 0.0) || !(sigma_max >= sigma_min)) {
    fail("sigma_min/sigma_max", "must satisfy 0 < sigma_min <= sigma_max");
  }
}

World::World(const WorldConfig& config) : config_(config) {
  config_.validate();
  const std::size_t m = config_.latent_dim;
  const double pd = pair_distance(config_);
  const double half = pd * std::max(1.0, std::pow(static_cast<double>(config_.clusters_known),
                                                  1.0 / static_cast<double>(m))) * 1.5;
  scale_ = half + pd;

  Rng geo(derive_seed(config_.seed, kStreamGeometry));
  constexpr int kMaxTries = 100000;
  for (std::size_t k = 0; k < config_.clusters_known; ++k) {
    for (int attempt = 0;; ++attempt) {
      if (attempt == kMaxTries) {
        throw ConfigError("world config: cannot place " + std::to_string(config_.clusters_known) +
                          " separated known clusters in latent_dim " + std::to_string(m));
      }
      std::vector<double> c(m);
      for (double& v : c) v = geo.uniform(-half, half);
      const bool ok = std::all_of(known_.begin(), known_.end(), [&](const auto& o) {
        return distance(c, o) >= 2.0 * pd;
      });
      if (ok) {
        known_.push_back(std::move(c));
        break;
      }
    }
  }
  for (std::size_t j = 0; j < config_.clusters_unknown; ++j) {
    const auto& partner = known_[j % known_.size()];
    for (int attempt = 0;; ++attempt) {
      if (attempt == kMaxTries) {
        throw ConfigError("world config: cannot place " +
                          std::to_string(config_.clusters_unknown) + " unknown clusters");
      }
      const auto u = random_unit(geo, m);
      std::vector<double> c(m);
      for (std::size_t i = 0; i < m; ++i) c[i] = partner[i] + pd * u[i];
      bool ok = true;
      for (std::size_t k = 0; k < known_.size() && ok; ++k) {
        if (&known_[k] != &partner) ok = distance(c, known_[k]) >= pd;
      }
      for (const auto& o : unknown_) ok = ok && distance(c, o) >= pd;
      if (ok) {
        unknown_.push_back(std::move(c));
        break;
      }
    }
  }

  Rng lay(derive_seed(config_.seed, kStreamLayers));
  const std::size_t d = config_.hidden_dim;
  const std::size_t L = config_.num_layers;
  const double map_scale = 1.0 / std::sqrt(static_cast<double>(m));
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<double> a(d * m), b(d), u(d);
    for (double& v : a) v = lay.normal() * map_scale;
    for (double& v : b) v = lay.normal() * 0.25;
    for (double& v : u) v = lay.normal();
    maps_.push_back(std::move(a));
    offsets_.push_back(std::move(b));
    directions_.push_back(std::move(u));
    const double frac = L == 1 ? 0.0 : static_cast<double>(l) / static_cast<double>(L - 1);
    sharpening_.push_back(std::pow(4.0, frac));
  }
}

double World::frontier_distance(std::span<const double> z) const {
  double dk = std::numeric_limits<double>::infinity();
  double du = std::numeric_limits<double>::infinity();
  for (const auto& c : known_) dk = std::min(dk, distance(z, c));
  for (const auto& c : unknown_) du = std::min(du, distance(z, c));
  return du - dk;
}

double World::answer_probability(std::span<const double> z) const {
  return 1.0 / (1.0 + std::exp(-config_.frontier_steepness * frontier_distance(z)));
}

std::uint8_t World::rule_label(std::span<const double> z) const {
  return frontier_distance(z) >= 0.0 ? 1 : 0;
}

double World::nearest_center_distance(std::span<const double> z) const {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& c : known_) best = std::min(best, distance(z, c));
  for (const auto& c : unknown_) best = std::min(best, distance(z, c));
  return best;
}

LayerStates World::layer_states(std::span<const double> z) const {
  const std::size_t m = config_.latent_dim;
  const std::size_t d = config_.hidden_dim;
  const double s = frontier_distance(z);
  const double soft = std::tanh(s / config_.boundary_width);
  LayerStates out(config_.num_layers, std::vector<double>(d));
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const double feature =
        std::copysign(std::pow(std::abs(soft), 1.0 / sharpening_[l]), soft) * config_.feature_gain;
    const auto& a = maps_[l];
    for (std::size_t i = 0; i < d; ++i) {
      double pre = offsets_[l][i] + feature * directions_[l][i];
      for (std::size_t j = 0; j < m; ++j) pre += a[i * m + j] * z[j] / scale_;
      out[l][i] = std::tanh(pre);
    }
  }
  return out;
}

std::array<std::size_t, 3> region_counts(const WorldConfig& config) {
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = config.region_fractions[i] * static_cast<double>(config.records);
    counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  while (assigned < config.records) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < 3; ++i)
      if (rem[i] > rem[best]) best = i;
    counts[best] += 1;
    rem[best] = -1.0;
    assigned += 1;
  }
  return counts;
}

namespace {

std::vector<double> sample_core(Rng& rng, std::span<const double> center) {
  const std::size_t m = center.size();
  const auto u = random_unit(rng, m);
  const double r = kCoreRadius * std::pow(rng.uniform(), 1.0 / static_cast<double>(m)) *
                   (1.0 - 1e-9);
  std::vector<double> z(m);
  for (std::size_t i = 0; i < m; ++i) z[i] = center[i] + r * u[i];
  return z;
}

std::vector<double> sample_boundary(Rng& rng, const World& world) {
  const auto& cfg = world.config();
  const std::size_t m = cfg.latent_dim;
  const auto& known = world.known_centers();
  const auto& unknown = world.unknown_centers();
  for (;;) {
    const std::size_t j = rng.below(unknown.size());
    const auto& cu = unknown[j];
    const auto& ck = known[j % known.size()];
    const bool from_known = rng.bernoulli(0.5);
    const auto& origin = from_known ? ck : cu;
    const auto& target = from_known ? cu : ck;
    std::vector<double> dir(m);
    double n2 = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      dir[i] = (target[i] - origin[i]) / pair_distance(cfg) + kBoundaryJitter * rng.normal();
      n2 += dir[i] * dir[i];
    }
    const double inv = 1.0 / std::sqrt(n2);
    const double r = kCoreRadius + cfg.boundary_width * (1.0 - rng.uniform());
    std::vector<double> z(m);
    for (std::size_t i = 0; i < m; ++i) z[i] = origin[i] + r * dir[i] * inv;
    const double near = world.nearest_center_distance(z);
    if (near > kCoreRadius && near <= kCoreRadius + cfg.boundary_width) return z;
  }
}

}  // namespace

std::vector<SynthRecord> synth_generate(const WorldConfig& config) {
  return synth_generate(World(config));
}

std::vector<SynthRecord> synth_generate(const World& world) {
  const auto& cfg = world.config();
  const auto counts = region_counts(cfg);
  std::vector<SynthRecord> out;
  out.reserve(cfg.records);
  std::uint64_t id = 0;
  for (std::size_t region = 0; region < 3; ++region) {
    for (std::size_t i = 0; i < counts[region]; ++i, ++id) {
      Rng rng(derive_seed(derive_seed(cfg.seed, kStreamRecords), id));
      SynthRecord rec;
      rec.id = id;
      switch (region) {
        case 0:
          rec.region = Region::StableKnown;
          rec.latent = sample_core(rng, world.known_centers()[rng.below(cfg.clusters_known)]);
          rec.label = 1;
          break;
        case 1:
          rec.region = Region::StableUnknown;
          rec.latent = sample_core(rng, world.unknown_centers()[rng.below(cfg.clusters_unknown)]);
          rec.label = 0;
          break;
        default:
          rec.region = Region::Boundary;
          rec.latent = sample_boundary(rng, world);
          rec.label = rng.bernoulli(world.answer_probability(rec.latent)) ? 1 : 0;
          break;
      }
      if (rng.bernoulli(cfg.label_noise)) rec.label ^= 1;
      rec.states = world.layer_states(rec.latent);
      out.push_back(std::move(rec));
    }
  }
  return out;
}

double ground_truth_stability(const SynthRecord& record, const World& world, std::size_t trials,
                              std::uint64_t seed) {
  if (trials == 0) throw ConfigError("ground_truth_stability: trials must be >= 1");
  Rng rng(seed);
  const double scale = world.config().boundary_width / 2.0;
  const std::uint8_t base = world.rule_label(record.latent);
  std::size_t flips = 0;
  std::vector<double> z(record.latent.size());
  for (std::size_t t = 0; t < trials; ++t) {
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = record.latent[i] + scale * rng.normal();
    if (world.rule_label(z) != base) ++flips;
  }
  return static_cast<double>(flips) / static_cast<double>(trials);
}

std::string_view to_string(SeriesScheme scheme) {
  return scheme == SeriesScheme::DeltaTargets ? "delta_targets" : "sigma_grid";
}

SeriesScheme series_scheme_from_string(std::string_view text) {
  if (text == "delta_targets") return SeriesScheme::DeltaTargets;
  if (text == "sigma_grid") return SeriesScheme::SigmaGrid;
  throw ConfigError("unknown series_scheme '" + std::string(text) +
                    "' (expected delta_targets or sigma_grid)");
}

Dataset synth_dataset(const WorldConfig& config) {
  const World world(config);
  auto synth = synth_generate(world);
  Dataset ds;
  ds.layer_count = config.num_layers;
  ds.hidden_dim = config.hidden_dim;
  const bool targeted = config.series_scheme == SeriesScheme::DeltaTargets;
  std::vector<double> grid;
  if (config.series_length > 0) {
    grid = targeted ? bin_centers(config.series_length)
                    : log_spaced(config.sigma_min, config.sigma_max, config.series_length);
  }
  const std::uint64_t series_seed = derive_seed(config.seed, kStreamSeries);
  ds.records.reserve(synth.size());
  for (auto& s : synth) {
    HiddenRecord r;
    r.id = s.id;
    r.label = s.label;
    r.region = s.region;
    // Quantize first so stored deltas describe exactly the stored vectors.
    for (auto& v : s.states)
      for (double& x : v) x = static_cast<float>(x);
    r.states = std::move(s.states);
    if (config.series_length > 0) {
      r.series = targeted
                     ? build_targeted_series(r.states, grid, series_seed ^ s.id)
                     : build_series(r.states, config.series_length, grid, series_seed ^ s.id);
    }
    ds.records.push_back(std::move(r));
  }
  quantize_to_storage(ds);
  // Float rounding can merge nearly equal deltas; drop the later duplicates.
  for (auto& r : ds.records) {
    auto& e = r.series.entries;
    e.erase(std::unique(e.begin(), e.end(),
                        [](const SeriesEntry& a, const SeriesEntry& b) { return !(b.delta > a.delta); }),
            e.end());
  }
  ds.manifest = {
      {"model", "synthetic"},
      {"source", "synthworld"},
      {"seed", std::to_string(config.seed)},
      {"layers", [&] {
         std::string s;
         for (std::size_t l = 0; l < config.num_layers; ++l) s += (l ? "," : "") + std::to_string(l);
         return s;
       }()},
      {"series_kind", "representational"},
      {"series_scheme", std::string(to_string(config.series_scheme))},
      {"boundary_width", std::to_string(config.boundary_width)},
      {"stability_eps", std::to_string(config.stability_eps)},
  };
  return ds;
}

}  // namespace lyaprobe
