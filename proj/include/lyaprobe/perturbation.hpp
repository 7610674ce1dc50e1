#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace lyaprobe {

// One hidden vector per selected model layer, all of the same width.
using LayerStates = std::vector<std::vector<double>>;

enum class SeriesKind : std::uint8_t { Representational = 0, Semantic = 1, Synthetic = 2 };

std::string_view to_string(SeriesKind kind);
SeriesKind series_kind_from_string(std::string_view text);

struct SeriesEntry {
  double delta = 0.0;
  LayerStates states;
};

// Perturbed copies of a record's base states, ordered by strictly increasing
// delta in (0, 2]. The unperturbed state (delta 0) is not stored here.
struct PerturbationSeries {
  SeriesKind kind = SeriesKind::Representational;
  std::vector<SeriesEntry> entries;

  bool empty() const { return entries.empty(); }
  std::size_t size() const { return entries.size(); }
  // Throws ContractError if deltas are out of range or not strictly increasing.
  void validate() const;
};

// 1 - cos(h, h_pert), clamped to [0, 2].
double delta_of(std::span<const double> h, std::span<const double> h_pert);
// Same measure on the concatenation of all layer vectors.
double delta_of(const LayerStates& h, const LayerStates& h_pert);

struct PerturbedStates {
  LayerStates states;
  double delta = 0.0;
};

// Adds zero-mean Gaussian noise with standard deviation sigma * RMS(layer)
// independently to each layer vector.
PerturbedStates gaussian_perturb(const LayerStates& states, double sigma, std::uint64_t seed);

// One perturbation per sigma, sorted by measured delta, with near-duplicates
// (closer than kSeriesDedupTolerance) and zero-delta draws removed.
inline constexpr double kSeriesDedupTolerance = 1e-6;
PerturbationSeries build_series(const LayerStates& states, std::size_t k,
                                std::span<const double> sigma_grid, std::uint64_t seed);

// Gaussian noise drawn as in gaussian_perturb (sigma 1), with its component
// along the concatenated base vector removed, then rescaled so that the
// measured delta equals `target` up to rounding. Requires 0 < target < 1.
PerturbedStates targeted_perturb(const LayerStates& states, double target, std::uint64_t seed);

// One targeted perturbation per target; targets strictly increasing in (0, 1).
PerturbationSeries build_targeted_series(const LayerStates& states,
                                         std::span<const double> targets, std::uint64_t seed);

// Centers of k equal-width bins over [0, 1]: (i + 0.5) / k.
std::vector<double> bin_centers(std::size_t k);

// k values log-spaced over [lo, hi].
std::vector<double> log_spaced(double lo, double hi, std::size_t k);

}  // namespace lyaprobe
