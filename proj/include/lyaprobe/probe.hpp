#pragma once

// Probe network V(h, delta): per-layer input projections plus a delta token
// feed one multi-head self-attention block (residual + layer norm), the tokens
// are mean-pooled, passed through a 2-layer tanh projector and a 3-layer MLP
// classifier (relu, relu, sigmoid).

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "lyaprobe/autodiff.hpp"
#include "lyaprobe/dataset.hpp"
#include "lyaprobe/optim.hpp"

namespace lyaprobe {

struct ProbeConfig {
  std::size_t num_layers = 3;
  std::size_t hidden_dim = 32;
  std::size_t probe_dim = 64;
  std::size_t attention_heads = 4;
  std::array<std::size_t, 3> classifier_widths{64, 32, 1};
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ProbeConfig&) const = default;
};

struct ProbeParams {
  std::vector<ad::Tensor> input_weight;  // per layer [hidden_dim, probe_dim]
  std::vector<ad::Tensor> input_bias;    // per layer [1, probe_dim]
  std::vector<ad::Tensor> layer_embedding;  // per layer [1, probe_dim]
  ad::Tensor delta_direction;  // [1, probe_dim]
  ad::Tensor delta_bias;       // [1, probe_dim]
  ad::Tensor query_weight, query_bias;
  ad::Tensor key_weight, key_bias;
  ad::Tensor value_weight, value_bias;
  ad::Tensor output_weight, output_bias;
  ad::Tensor norm_gain, norm_bias;  // [probe_dim]
  std::array<ad::Tensor, 2> projector_weight, projector_bias;
  std::array<ad::Tensor, 3> classifier_weight, classifier_bias;

  // Every tensor in a fixed order, with stable names.
  std::vector<ad::NamedParam> named() const;
  // Deep copy with fresh leaves.
  ProbeParams clone(bool requires_grad = false) const;
  void set_requires_grad(bool on);
};

ProbeParams init_probe(const ProbeConfig& config);

// A batch of probe inputs. layers[l] is [batch, hidden_dim], delta is [batch, 1].
struct ProbeBatch {
  std::vector<ad::Tensor> layers;
  ad::Tensor delta;
  std::size_t size = 0;
};

// Stacks states row-wise. With delta_requires_grad the delta column becomes a
// leaf so backward() yields dV/d(delta).
ProbeBatch make_batch(std::span<const LayerStates* const> states, std::span<const double> deltas,
                      bool delta_requires_grad = false);

// Pre-sigmoid output, [batch, 1].
ad::Tensor forward_logits(const ProbeParams& params, const ProbeConfig& config,
                          const ProbeBatch& batch);
// V in (0, 1), [batch, 1].
ad::Tensor forward(const ProbeParams& params, const ProbeConfig& config, const ProbeBatch& batch);

double forward_V(const ProbeParams& params, const ProbeConfig& config, const LayerStates& states,
                 double delta);

// Classifier head alone, applied to pooled/projected features [batch, probe_dim].
ad::Tensor classifier_logits(const ProbeParams& params, const ad::Tensor& features);

struct Checkpoint {
  ProbeConfig config;
  NormStats stats;
  ProbeParams params;
};

// LYPR v1:
//   "LYPR" | u32 version
//   config: u32 num_layers | u32 hidden_dim | u32 probe_dim | u32 heads |
//           3 x u32 classifier widths | u64 seed
//   stats:  u32 layer_count | u32 hidden_dim | mean f64[] | std f64[]
//   params: u32 tensor_count, then per tensor u32 rank | rank x u64 dims | f64 data
//   u64 FNV-1a checksum of every preceding byte
inline constexpr char kCheckpointMagic[4] = {'L', 'Y', 'P', 'R'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_probe(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_probe(const std::filesystem::path& path);

}  // namespace lyaprobe
