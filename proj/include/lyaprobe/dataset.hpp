#pragma once

// Hidden-state dump format (LYPD v1), stratified splitting and feature
// normalization.
//
// LYPD layout, all integers and reals little-endian:
//   "LYPD" | u32 version | u32 layer_count | u32 hidden_dim | u64 record_count
//   u32 manifest_bytes | manifest (UTF-8 "key=value\n" lines, keys sorted)
//   per record:
//     u64 id | u8 label | u8 region | u16 K
//     base states: layer_count x hidden_dim f32
//     K x (f32 delta | layer_count x hidden_dim f32)
//   u64 FNV-1a checksum of every preceding byte

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lyaprobe/perturbation.hpp"

namespace lyaprobe {

enum class Region : std::uint8_t {
  NotApplicable = 0,
  StableKnown = 1,
  StableUnknown = 2,
  Boundary = 3,
};

std::string_view to_string(Region region);

struct HiddenRecord {
  std::uint64_t id = 0;
  std::uint8_t label = 0;
  Region region = Region::NotApplicable;
  LayerStates states;
  PerturbationSeries series;
};

using Manifest = std::map<std::string, std::string>;

struct Dataset {
  std::size_t layer_count = 0;
  std::size_t hidden_dim = 0;
  Manifest manifest;
  std::vector<HiddenRecord> records;

  // Shapes, labels and series ordering; throws ContractError.
  void validate() const;
};

inline constexpr char kDumpMagic[4] = {'L', 'Y', 'P', 'D'};
inline constexpr std::uint32_t kDumpVersion = 1;
// Header, manifest length prefix and checksum of an empty dump.
inline constexpr std::size_t kDumpFixedBytes = 36;

std::vector<std::uint8_t> encode_dump(const Dataset& dataset);
Dataset decode_dump(std::span<const std::uint8_t> bytes);
void write_dump(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_dump(const std::filesystem::path& path);

// Rounds every stored value through 32-bit storage precision.
void quantize_to_storage(Dataset& dataset);

struct SplitResult {
  std::vector<HiddenRecord> train;
  std::vector<HiddenRecord> validation;
  std::vector<std::string> warnings;
};

// Stratified on (label, region). Strata with fewer than two members go wholly
// to train with a warning. Both halves keep the input order.
SplitResult split(std::span<const HiddenRecord> records, double train_fraction,
                  std::uint64_t seed);

inline constexpr double kStdFloor = 1e-8;

struct NormStats {
  std::size_t layer_count = 0;
  std::size_t hidden_dim = 0;
  std::vector<double> mean;    // [layer * hidden_dim + j]
  std::vector<double> stddev;  // floored at kStdFloor

  static NormStats identity(std::size_t layer_count, std::size_t hidden_dim);
  void apply(LayerStates& states) const;
};

// Fitted on base (unperturbed) states only.
NormStats normalize_fit(std::span<const HiddenRecord> train);
// Transforms base and series states; stored deltas are left untouched.
std::vector<HiddenRecord> normalize_apply(std::span<const HiddenRecord> records,
                                          const NormStats& stats);

// Keeps only the given layer positions in base and series states.
std::vector<HiddenRecord> select_layers(std::span<const HiddenRecord> records,
                                        std::span<const std::size_t> layers);

}  // namespace lyaprobe
