#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "convattn/model.hpp"

namespace convattn {

/// Ordered key -> value view of a flat "key = value" file.
using ConfigMap = std::map<std::string, std::string>;

/// Parses "key = value" lines; '#' starts a comment, blank lines are ignored.
/// Throws ConfigError on malformed lines and repeated keys.
ConfigMap parse_config(const std::string& text, const std::string& origin = "<string>");
ConfigMap read_config(const std::filesystem::path& path);

struct TrainConfig {
  std::size_t batch_size = 32;
  std::string optimizer = "adam";
  double learning_rate = 1e-3;
  double clip_norm = 1.0;
  double dropout = 0.5;  // drop probability at every dropout site
  double fine_tune_lr = 1e-4;
  double weight_decay = 1e-5;
  std::size_t patience = 5;
  std::size_t max_epochs = 100;
  std::size_t beam = 10;
  std::size_t dev_limit = 0;      // decode at most this many dev utterances per epoch; 0 = all
  double target_dev_per = -1.0;   // stop once dev error rate <= this; negative disables
  double max_seconds = 0.0;       // stop after this much wall time; 0 disables
  std::size_t max_steps = 0;      // stop after this many optimizer steps; 0 disables
};

/// Everything a command needs, resolved from a config file plus flags.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string manifest;
  std::string vocab;
  std::string norm_stats;
  std::string out;
  ModelConfig model;
  TrainConfig train;

  /// Applies every key in `values`; unknown keys and unparsable values
  /// raise ConfigError naming the key.
  void apply(const ConfigMap& values);
  ConfigMap to_map() const;
  std::string to_text() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

/// Model dimensions only ("model.*" keys) for checkpoint metadata.
ConfigMap model_config_map(const ModelConfig& config);
ModelConfig model_config_from_map(const ConfigMap& values);

}  // namespace convattn
