#include "lyaprobe/perturbation.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lyaprobe/error.hpp"
#include "lyaprobe/random.hpp"

namespace lyaprobe {

std::string_view to_string(SeriesKind kind) {
  switch (kind) {
    case SeriesKind::Representational: return "representational";
    case SeriesKind::Semantic: return "semantic";
    case SeriesKind::Synthetic: return "synthetic";
  }
  return "unknown";
}

SeriesKind series_kind_from_string(std::string_view text) {
  if (text == "representational") return SeriesKind::Representational;
  if (text == "semantic") return SeriesKind::Semantic;
  if (text == "synthetic") return SeriesKind::Synthetic;
  throw ConfigError("unknown series kind '" + std::string(text) + "'");
}

void PerturbationSeries::validate() const {
  double prev = 0.0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const double d = entries[i].delta;
    if (!(d > prev) || d > 2.0) {
      throw ContractError("perturbation series: delta[" + std::to_string(i) + "] = " +
                          std::to_string(d) + " breaks strict increase within (0, 2]");
    }
    prev = d;
  }
}

namespace {

struct Moments {
  double dot = 0.0, hh = 0.0, pp = 0.0;
  void add(std::span<const double> h, std::span<const double> p) {
    for (std::size_t i = 0; i < h.size(); ++i) {
      dot += h[i] * p[i];
      hh += h[i] * h[i];
      pp += p[i] * p[i];
    }
  }
  double delta() const {
    if (hh == 0.0 || pp == 0.0) {
      throw DegenerateInputError("delta_of: zero-norm vector, cosine undefined");
    }
    // hh * pp is symmetric in the two arguments and equals dot * dot for
    // identical inputs, so delta_of(h, h) is exactly 0.
    const double cosine = dot / std::sqrt(hh * pp);
    return std::clamp(1.0 - cosine, 0.0, 2.0);
  }
};

}  // namespace

double delta_of(std::span<const double> h, std::span<const double> h_pert) {
  if (h.size() != h_pert.size()) {
    throw DimensionError("delta_of: length mismatch " + std::to_string(h.size()) + " vs " +
                         std::to_string(h_pert.size()));
  }
  Moments m;
  m.add(h, h_pert);
  return m.delta();
}

double delta_of(const LayerStates& h, const LayerStates& h_pert) {
  if (h.size() != h_pert.size()) {
    throw DimensionError("delta_of: layer count mismatch " + std::to_string(h.size()) + " vs " +
                         std::to_string(h_pert.size()));
  }
  Moments m;
  for (std::size_t l = 0; l < h.size(); ++l) {
    if (h[l].size() != h_pert[l].size()) {
      throw DimensionError("delta_of: layer " + std::to_string(l) + " length mismatch");
    }
    m.add(h[l], h_pert[l]);
  }
  return m.delta();
}

PerturbedStates gaussian_perturb(const LayerStates& states, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
    throw ConfigError("gaussian_perturb: sigma must be finite and >= 0, got " +
                      std::to_string(sigma));
  }
  Rng rng(seed);
  PerturbedStates out;
  out.states = states;
  for (std::size_t l = 0; l < states.size(); ++l) {
    const auto& h = states[l];
    double ss = 0.0;
    for (double v : h) ss += v * v;
    if (ss == 0.0) {
      throw DegenerateInputError("gaussian_perturb: layer " + std::to_string(l) +
                                 " has a zero-norm base vector");
    }
    const double noise_scale = sigma * std::sqrt(ss / static_cast<double>(h.size()));
    if (noise_scale == 0.0) continue;
    for (double& v : out.states[l]) v += noise_scale * rng.normal();
  }
  out.delta = delta_of(states, out.states);
  return out;
}

PerturbationSeries build_series(const LayerStates& states, std::size_t k,
                                std::span<const double> sigma_grid, std::uint64_t seed) {
  if (k == 0) throw ConfigError("build_series: K must be >= 1");
  if (sigma_grid.size() != k) {
    throw ConfigError("build_series: sigma grid has " + std::to_string(sigma_grid.size()) +
                      " values, expected K = " + std::to_string(k));
  }
  for (double s : sigma_grid) {
    if (!(s > 0.0)) throw ConfigError("build_series: sigma grid values must be positive");
  }
  std::vector<SeriesEntry> draws;
  draws.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    auto p = gaussian_perturb(states, sigma_grid[i], derive_seed(seed, i));
    draws.push_back({p.delta, std::move(p.states)});
  }
  std::stable_sort(draws.begin(), draws.end(),
                   [](const SeriesEntry& a, const SeriesEntry& b) { return a.delta < b.delta; });
  PerturbationSeries series;
  series.kind = SeriesKind::Representational;
  double prev = 0.0;
  for (auto& d : draws) {
    if (d.delta - prev < kSeriesDedupTolerance) continue;
    prev = d.delta;
    series.entries.push_back(std::move(d));
  }
  if (series.entries.empty()) {
    throw DegenerateInputError("build_series: no entries left after deduplication");
  }
  return series;
}

PerturbedStates targeted_perturb(const LayerStates& states, double target, std::uint64_t seed) {
  if (!(target > 0.0 && target < 1.0)) {
    throw ConfigError("targeted_perturb: target delta must lie in (0, 1), got " +
                      std::to_string(target));
  }
  auto noise = gaussian_perturb(states, 1.0, seed).states;
  double hn = 0.0, hh = 0.0;
  for (std::size_t l = 0; l < states.size(); ++l) {
    for (std::size_t j = 0; j < states[l].size(); ++j) {
      noise[l][j] -= states[l][j];
      hn += states[l][j] * noise[l][j];
      hh += states[l][j] * states[l][j];
    }
  }
  double nn = 0.0;
  for (std::size_t l = 0; l < states.size(); ++l) {
    for (std::size_t j = 0; j < states[l].size(); ++j) {
      noise[l][j] -= hn / hh * states[l][j];
      nn += noise[l][j] * noise[l][j];
    }
  }
  if (nn == 0.0) throw DegenerateInputError("targeted_perturb: noise parallel to base vector");
  // cos(h, h + t n) = 1 / sqrt(1 + t^2 |n|^2 / |h|^2) for n orthogonal to h.
  const double c = 1.0 - target;
  const double t = std::sqrt(hh / nn) * std::sqrt(1.0 / (c * c) - 1.0);
  PerturbedStates out;
  out.states = states;
  for (std::size_t l = 0; l < states.size(); ++l) {
    for (std::size_t j = 0; j < states[l].size(); ++j) out.states[l][j] += t * noise[l][j];
  }
  out.delta = delta_of(states, out.states);
  return out;
}

PerturbationSeries build_targeted_series(const LayerStates& states,
                                         std::span<const double> targets, std::uint64_t seed) {
  if (targets.empty()) throw ConfigError("build_targeted_series: no targets");
  PerturbationSeries series;
  series.kind = SeriesKind::Representational;
  double prev = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!(targets[i] > prev)) {
      throw ConfigError("build_targeted_series: targets must be strictly increasing");
    }
    prev = targets[i];
    auto p = targeted_perturb(states, targets[i], derive_seed(seed, i));
    series.entries.push_back({p.delta, std::move(p.states)});
  }
  series.validate();
  return series;
}

std::vector<double> bin_centers(std::size_t k) {
  std::vector<double> out(k);
  for (std::size_t i = 0; i < k; ++i) {
    out[i] = (static_cast<double>(i) + 0.5) / static_cast<double>(k);
  }
  return out;
}

std::vector<double> log_spaced(double lo, double hi, std::size_t k) {
  if (k == 0) return {};
  if (!(lo > 0.0) || !(hi >= lo)) {
    throw ConfigError("log_spaced: need 0 < lo <= hi");
  }
  std::vector<double> out(k);
  if (k == 1) {
    out[0] = lo;
    return out;
  }
  const double a = std::log(lo), b = std::log(hi);
  for (std::size_t i = 0; i < k; ++i) {
    out[i] = std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(k - 1));
  }
  out.back() = hi;
  return out;
}

}  // namespace lyaprobe
