#pragma once

#include <vector>

#include "convattn/ops.hpp"
#include "convattn/rng.hpp"
#include "convattn/tensor.hpp"

namespace convattn::layers {

enum class Mode { train, infer };

/// Per-pass settings shared by every layer of a forward pass.
struct ForwardContext {
  Mode mode = Mode::infer;
  double keep_prob = 1.0;
  Rng* rng = nullptr;  // required when mode == train and keep_prob < 1
  bool update_running_stats = true;
  // Valid extent of axis 1 (time) for each batch entry. When set, batch norm
  // ignores and zeroes positions past each length. Empty means all valid.
  std::vector<std::size_t> lengths;
};

/// One flag per C-vector of x[B x T x ... x C]: true where t < lengths[b].
std::vector<bool> valid_rows(const Shape& shape, const std::vector<std::size_t>& lengths);

enum class Activation { identity, relu, tanh, sigmoid };

/// activation(x W + b)
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b, Activation act);

// ---------------------------------------------------------------- LSTM

struct LSTMState {
  Tensor h;  // [B x H]
  Tensor c;  // [B x H]
};

/// Peephole LSTM parameters. Gate blocks in w_x, w_h and b are ordered
/// (input, forget, cell, output); peephole weights are diagonal.
struct LSTMWeights {
  Tensor w_x;   // [Din x 4H]
  Tensor w_h;   // [H x 4H]
  Tensor b;     // [4H]
  Tensor w_ci;  // [H]
  Tensor w_cf;  // [H]
  Tensor w_co;  // [H]

  std::size_t units() const { return w_h.dim(0); }
};

LSTMState zero_state(std::size_t batch, std::size_t units);

/// i = s(Wxi x + Whi h + wci.c_prev + bi)
/// f = s(Wxf x + Whf h + wcf.c_prev + bf)
/// c = f.c_prev + i.tanh(Wxc x + Whc h + bc)
/// o = s(Wxo x + Who h + wco.c + bo)
/// h = o.tanh(c)
LSTMState lstm_peephole_step(const Tensor& x_t, const LSTMState& prev, const LSTMWeights& w);

/// Same step with x W_x + b already computed ([B x 4H]).
LSTMState lstm_peephole_step_projected(const Tensor& x_proj, const LSTMState& prev, const LSTMWeights& w);

/// Runs over x[B x S x D]. With `reverse`, steps run from S-1 down to 0 and
/// each sequence starts at its own last valid frame (lengths[b]); padded
/// steps leave the state at zero. Returns hidden states [B x S x H] aligned
/// with the input positions.
Tensor lstm(const Tensor& x, const LSTMWeights& w, const std::vector<std::size_t>& lengths, bool reverse);

struct BiLSTMWeights {
  LSTMWeights forward;
  LSTMWeights backward;
};

/// h_t = [forward h_t ; backward h_t], [B x S x 2H]. Empty input is an error.
Tensor bilstm(const Tensor& x, const BiLSTMWeights& w, const std::vector<std::size_t>& lengths);

// ------------------------------------------------------ normalization

struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;  // buffer
  Tensor running_var;   // buffer
  double momentum = 0.99;
  double eps = 1e-8;
};

/// Normalizes over every leading axis of x[... x C]: for conv feature maps
/// that pools batch and all spatial positions per channel. Train mode uses
/// batch statistics and updates the running averages; infer mode uses the
/// running averages. Positions outside ctx.lengths are excluded and zeroed.
Tensor batchnorm(const Tensor& x, BatchNormState& state, const ForwardContext& ctx);

// ------------------------------------------------------------ dropout

enum class DropoutStyle {
  inverted,        // train: mask / keep_prob, infer: identity
  weight_scaling,  // train: mask, infer: x * keep_prob
};

struct DropoutSpec {
  double keep_prob = 0.5;
  Mode mode = Mode::train;
  DropoutStyle style = DropoutStyle::inverted;
};

/// Bernoulli(keep_prob) mask drawn from rng, resampled on every call.
Tensor dropout(const Tensor& x, const DropoutSpec& spec, Rng* rng);

/// Dropout driven by a forward context (inverted style).
Tensor dropout(const Tensor& x, const ForwardContext& ctx);

// ------------------------------------------------------- conv blocks

struct ConvBlockWeights {
  Tensor filters;  // [K x kh x kw x Cin]
  BatchNormState bn;
  ops::Conv2dOptions conv;
};

/// conv -> batchnorm -> relu -> dropout. ctx.lengths, if set, are the input
/// lengths along axis 1; they shrink by the axis-1 stride (rounding up).
Tensor conv_block(const Tensor& x, ConvBlockWeights& w, const ForwardContext& ctx);

struct ResidualBlockWeights {
  ConvBlockWeights first;
  ConvBlockWeights second;
  Tensor projection;  // [K x 1 x 1 x Cin]; undefined when Cin == K
};

/// x + f(x), f = two conv blocks at stride 1. When the block changes the
/// channel count the skip path goes through the 1x1 projection.
Tensor residual_block(const Tensor& x, ResidualBlockWeights& w, const ForwardContext& ctx);

struct DenseBlockWeights {
  Tensor w;  // [Din x Dout]
  BatchNormState bn;
};

/// x W -> batchnorm -> relu -> dropout, over rows of x[N x Din] or over the
/// last axis of x[B x T x Din].
Tensor dense_block(const Tensor& x, DenseBlockWeights& w, const ForwardContext& ctx);

}  // namespace convattn::layers
