#pragma once

// Flat "key = value" configuration files. Blank lines and lines starting
// with '#' are ignored; keys may appear once.

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lyaprobe/probe.hpp"
#include "lyaprobe/synthworld.hpp"
#include "lyaprobe/training.hpp"

namespace lyaprobe {

using KvEntries = std::vector<std::pair<std::string, std::string>>;

KvEntries parse_kv(std::string_view text);
KvEntries read_kv(const std::filesystem::path& path);

// Comma-separated non-negative integers; errors name `key`.
std::vector<std::size_t> parse_index_list(const std::string& key, const std::string& value);

// Settings consumed by train / eval / ablate-layers.
struct RunConfig {
  ProbeConfig probe;
  TrainConfig train;
  std::vector<std::size_t> layers;  // empty: all layers in the dump
  double train_fraction = 0.8;
  std::size_t bins = 10;
};

// Unknown keys and unparsable values throw ConfigError naming the key.
void apply_world_config(const KvEntries& entries, WorldConfig& config);
void apply_run_config(const KvEntries& entries, RunConfig& config);

}  // namespace lyaprobe
