#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "convattn/gradcheck.hpp"
#include "convattn/optim.hpp"
#include "convattn/params.hpp"

namespace convattn {

/// Single-file snapshot: little-endian
///   "CKPT" u32 version
///   u32 n_meta   { u32 len, key bytes, u32 len, value bytes } * n_meta
///   u32 n_tensor { u32 len, name bytes, u32 rank, u64 dim * rank, u64 offset } * n_tensor
///   u64 n_values, f64 * n_values
/// Tensor offsets count doubles from the start of the payload.
struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<NamedTensor> tensors;

  const std::string* find_meta(const std::string& key) const;
  const std::string& meta_value(const std::string& key) const;  // throws FormatError when absent
  void set_meta(const std::string& key, std::string value);
  const NamedTensor* find(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Appends every parameter and buffer under its own name.
void add_model_state(Checkpoint& ckpt, const ModelParams& params);

/// Copies values into params. Throws ConfigError naming the first tensor that
/// is missing or has a different shape.
void restore_model_state(const Checkpoint& ckpt, ModelParams& params);

/// Adam moments as "opt.m/<name>", "opt.v/<name>" plus step/lr metadata.
void add_optimizer_state(Checkpoint& ckpt, const ModelParams& params, const OptimizerState& opt);
void restore_optimizer_state(const Checkpoint& ckpt, const ModelParams& params, OptimizerState& opt);

}  // namespace convattn
