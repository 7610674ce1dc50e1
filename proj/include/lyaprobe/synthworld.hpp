#pragma once

// Synthetic hidden-state worlds with a known three-way partition of latent
// space: stable-known cores, stable-unknown cores, and a fragile boundary
// shell between paired known/unknown cores.

#include <array>
#include <cstdint>
#include <string_view>
#include <vector>

#include "lyaprobe/dataset.hpp"

namespace lyaprobe {

enum class SeriesScheme { DeltaTargets, SigmaGrid };

std::string_view to_string(SeriesScheme scheme);
SeriesScheme series_scheme_from_string(std::string_view text);

struct WorldConfig {
  std::size_t latent_dim = 8;
  std::size_t clusters_known = 4;
  std::size_t clusters_unknown = 4;
  double boundary_width = 0.5;   // epsilon_0: width of the fragile shell
  double stability_eps = 0.1;    // epsilon: output-change tolerance (recorded in the manifest)
  std::size_t num_layers = 3;
  std::size_t hidden_dim = 32;
  std::size_t records = 2000;
  std::array<double, 3> region_fractions{0.4, 0.4, 0.2};  // S_K, S_U, B
  double label_noise = 0.05;
  std::uint64_t seed = 42;

  double frontier_steepness = 20.0;  // slope of the boundary label sigmoid
  double feature_gain = 0.8;         // strength of the frontier feature in hidden states

  // Representational perturbation series attached to each record. With
  // DeltaTargets every record gets points at the same deltas, the centers of
  // series_length equal bins over [0, 1]; SigmaGrid draws log-spaced sigmas
  // over [sigma_min, sigma_max] and keeps whatever deltas result.
  SeriesScheme series_scheme = SeriesScheme::DeltaTargets;
  std::size_t series_length = 6;
  double sigma_min = 0.05;
  double sigma_max = 0.8;

  void validate() const;
};

inline constexpr double kCoreRadius = 1.0;

// Fixed geometry and layer maps derived from a WorldConfig.
class World {
 public:
  explicit World(const WorldConfig& config);

  const WorldConfig& config() const { return config_; }
  const std::vector<std::vector<double>>& known_centers() const { return known_; }
  const std::vector<std::vector<double>>& unknown_centers() const { return unknown_; }

  // Distance to the nearest unknown center minus distance to the nearest
  // known center; positive on the known side of the frontier.
  double frontier_distance(std::span<const double> z) const;
  // Probability of a correct answer under the boundary label rule.
  double answer_probability(std::span<const double> z) const;
  // Deterministic label rule: 1 iff answer_probability(z) >= 0.5.
  std::uint8_t rule_label(std::span<const double> z) const;
  // Distance to the nearest core center of either kind.
  double nearest_center_distance(std::span<const double> z) const;

  LayerStates layer_states(std::span<const double> z) const;

  // Per-layer sharpening exponents, 1 .. 4 geometrically.
  const std::vector<double>& sharpening() const { return sharpening_; }

 private:
  WorldConfig config_;
  double scale_ = 1.0;
  std::vector<std::vector<double>> known_, unknown_;
  std::vector<std::vector<double>> maps_;       // per layer, hidden_dim x latent_dim
  std::vector<std::vector<double>> offsets_;    // per layer, hidden_dim
  std::vector<std::vector<double>> directions_; // per layer, hidden_dim
  std::vector<double> sharpening_;
};

struct SynthRecord {
  std::uint64_t id = 0;
  std::vector<double> latent;
  Region region = Region::NotApplicable;
  std::uint8_t label = 0;
  LayerStates states;
};

// Region counts by largest-remainder allocation of records * fractions.
std::array<std::size_t, 3> region_counts(const WorldConfig& config);

std::vector<SynthRecord> synth_generate(const WorldConfig& config);
std::vector<SynthRecord> synth_generate(const World& world);

// Fraction of trials in which Gaussian latent noise of scale
// boundary_width / 2 flips the deterministic label rule.
double ground_truth_stability(const SynthRecord& record, const World& world, std::size_t trials,
                              std::uint64_t seed);

// Full dataset: records with perturbation series, quantized to storage
// precision, manifest filled in.
Dataset synth_dataset(const WorldConfig& config);

}  // namespace lyaprobe
