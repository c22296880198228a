#pragma once

#include <cstdint>
#include <vector>

#include "convattn/params.hpp"

namespace convattn {

/// Mean of -log_probs[i, targets[i]] over rows with targets[i] >= 0.
/// Throws std::invalid_argument when no row is valid.
Tensor cross_entropy_loss(const Tensor& log_probs, const std::vector<int>& targets);

/// Global L2 norm of every parameter gradient (missing gradients count as 0).
double gradient_norm(const ModelParams& params);

/// Rescales all gradients so their global norm is at most max_norm and
/// returns the factor applied (1 when untouched). Throws NumericError on a
/// non-finite gradient.
double clip_gradients(ModelParams& params, double max_norm);

/// Adds alpha * w to the gradient of every weight matrix (kinds weight and
/// lstm_weight); biases and batch-norm parameters are skipped.
void apply_weight_decay(ModelParams& params, double alpha);

/// Glorot-uniform weights, U(-0.1, 0.1) recurrent weights, zero biases and
/// beta, unit gamma. Batch-norm buffers are reset to mean 0, variance 1.
void init_params(ModelParams& params, std::uint64_t seed);

enum class OptimizerKind { sgd, adam };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;  // one per parameter, lazily sized
  std::vector<std::vector<double>> v;
};

/// theta -= lr * g
void sgd_step(ModelParams& params, OptimizerState& opt);

/// Adam with bias correction; increments opt.step first.
void adam_step(ModelParams& params, OptimizerState& opt);

/// Dispatches on opt.kind.
void optimizer_step(ModelParams& params, OptimizerState& opt);

}  // namespace convattn
