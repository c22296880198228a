#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "convattn/gradcheck.hpp"
#include "convattn/tensor.hpp"

namespace convattn {

/// What a trainable tensor is; drives initialization and weight decay.
enum class ParamKind { weight, lstm_weight, bias, bn_gamma, bn_beta };

const char* to_string(ParamKind kind);

struct Param {
  std::string name;
  Tensor value;
  ParamKind kind = ParamKind::weight;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
};

/// Named, ordered collection of trainable tensors plus non-trainable buffers
/// (batch-norm running statistics). Insertion order is the canonical order
/// for checkpoints and optimizer state.
class ModelParams {
 public:
  Tensor add(std::string name, Shape shape, ParamKind kind, std::size_t fan_in = 0, std::size_t fan_out = 0);
  Tensor add_buffer(std::string name, Shape shape, double fill);

  const std::vector<Param>& params() const { return params_; }
  const std::vector<NamedTensor>& buffers() const { return buffers_; }

  Tensor param(const std::string& name) const;
  Tensor buffer(const std::string& name) const;
  const Param* find(const std::string& name) const;
  const NamedTensor* find_buffer(const std::string& name) const;

  std::vector<NamedTensor> named_params() const;
  void zero_grad();
  std::size_t parameter_count() const;

  /// Deep copy of every value (gradients are not copied).
  ModelParams clone() const;

 private:
  std::vector<Param> params_;
  std::vector<NamedTensor> buffers_;
  std::unordered_map<std::string, std::size_t> param_index_;
  std::unordered_map<std::string, std::size_t> buffer_index_;
};

}  // namespace convattn
