#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cmtboost/data.hpp"
#include "cmtboost/model.hpp"
#include "cmtboost/train.hpp"

namespace cmtboost {

struct DataConfig {
  std::string dir;
  bool synthetic = false;
  std::size_t synthetic_count = 32;  // per class
  double noise_level = 0.08;
  std::array<double, 3> split{0.70, 0.10, 0.20};
  bool permissive = false;
  std::uint64_t seed = 42;
};

/// Fully resolved run configuration: desk64 defaults, then the config file's
/// `section.key = value` lines in order, then overrides.
struct ResolvedConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::string eval_checkpoint;

  // Whether seeds were set explicitly (a --seed flag only fills unset ones).
  bool model_seed_set = false;
  bool train_seed_set = false;
  bool data_seed_set = false;
};

/// `path` may be empty (pure defaults). Overrides use the same
/// "section.key = value" syntax. Unknown keys, malformed values, and violated
/// model invariants all raise ConfigError naming the key.
ResolvedConfig parse_config(const std::string& path, const std::vector<std::string>& overrides);

/// Canonical echo of a resolved configuration, parseable by parse_config.
std::string render_config(const ResolvedConfig& cfg);

}  // namespace cmtboost
