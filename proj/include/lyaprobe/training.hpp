#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lyaprobe/dataset.hpp"
#include "lyaprobe/evaluation.hpp"
#include "lyaprobe/probe.hpp"

namespace lyaprobe {

enum class LyapunovMode {
  // Finite-difference slopes between consecutive stored series points.
  PairwiseHinge,
  // Symmetric numerical dV/d(delta) at the series deltas, base states fixed.
  InputDerivative,
};

std::string_view to_string(LyapunovMode mode);
LyapunovMode lyapunov_mode_from_string(std::string_view text);

struct TrainConfig {
  std::size_t epochs_stage1 = 20;
  std::size_t epochs_stage2 = 20;
  std::size_t warmup_epochs = 5;
  double lambda_max = 0.5;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  LyapunovMode lyapunov_mode = LyapunovMode::PairwiseHinge;
  std::uint64_t seed = 0;

  // Redraw representational series every epoch instead of using stored ones.
  bool regenerate_series = false;
  std::size_t regen_series_length = 6;
  double regen_sigma_min = 0.05;
  double regen_sigma_max = 0.8;

  double derivative_step = 1e-3;

  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based, across both stages
  int stage = 1;
  double lambda = 0.0;
  double bce = 0.0;
  std::optional<double> lyapunov;  // only when the penalty was active
  std::optional<double> val_auprc;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  std::string to_csv() const;
};

struct TrainResult {
  ProbeParams params;
  NormStats stats;
  TrainLog log;
  std::vector<std::string> warnings;

  Checkpoint checkpoint(const ProbeConfig& config) const { return {config, stats, params}; }
};

// -[y ln V0 + (1 - y) ln(1 - V0)]. Throws DimensionError outside (0, 1).
double loss_bce(double v0, std::uint8_t y);

// Mean over adjacent pairs of max(0, dV / d(delta)) after prepending (0, V0).
double loss_lyapunov_pairwise(std::span<const double> series_v,
                              std::span<const double> series_delta, double v0);

// Mean over probe points of max(0, D(delta)) with
// D = (V(delta + eta) - V(delta - eta)) / (2 eta), or a forward difference
// when delta - eta < 0. `states` must already be normalized.
double loss_lyapunov_derivative(const ProbeParams& params, const ProbeConfig& config,
                                const LayerStates& states, std::span<const double> probe_points,
                                double eta = 1e-3);

// Stage-2 weight at 1-based stage-2 epoch t: lambda_max * min(1, t / W).
double lambda_at(std::size_t stage2_epoch, const TrainConfig& config);

// Differentiable penalty terms over a batch of normalized records; records
// without a series are skipped. Return nullopt when nothing contributes.
std::optional<ad::Tensor> lyapunov_pairwise_term(const ProbeParams& params,
                                                 const ProbeConfig& config,
                                                 std::span<const HiddenRecord* const> records);
std::optional<ad::Tensor> lyapunov_derivative_term(const ProbeParams& params,
                                                   const ProbeConfig& config,
                                                   std::span<const HiddenRecord* const> records,
                                                   double eta);

// Two-stage training: BCE on V0 for epochs_stage1, then BCE + lambda(t) *
// L_Lyapunov. Normalization stats are fitted on `train`.
TrainResult train(std::span<const HiddenRecord> train, std::span<const HiddenRecord> validation,
                  const ProbeConfig& probe_config, const TrainConfig& train_config);

// Trains one probe per layer subset (same seed and schedule) and reports
// validation AUPRC; the last entry is the all-layers probe.
std::vector<LayerScore> ablate_layers(std::span<const HiddenRecord> train,
                                       std::span<const HiddenRecord> validation,
                                       const ProbeConfig& probe_config,
                                       const TrainConfig& train_config,
                                       std::span<const std::vector<std::size_t>> subsets);

}  // namespace lyaprobe
