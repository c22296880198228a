#include "convattn/layers.hpp"

#include <stdexcept>

namespace convattn::layers {

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b, Activation act) {
  Tensor y = ops::affine(x, w, b);
  switch (act) {
    case Activation::identity: return y;
    case Activation::relu: return ops::relu(y);
    case Activation::tanh: return ops::tanh(y);
    case Activation::sigmoid: return ops::sigmoid(y);
  }
  return y;
}

LSTMState zero_state(std::size_t batch, std::size_t units) {
  return {Tensor::zeros({batch, units}), Tensor::zeros({batch, units})};
}

LSTMState lstm_peephole_step_projected(const Tensor& x_proj, const LSTMState& prev, const LSTMWeights& w) {
  const std::size_t h = w.units();
  if (x_proj.rank() != 2 || x_proj.dim(1) != 4 * h || prev.h.shape() != prev.c.shape() || prev.h.dim(1) != h ||
      prev.h.dim(0) != x_proj.dim(0)) {
    throw DimensionError("lstm step: projected input " + shape_str(x_proj.shape()) + ", state " +
                         shape_str(prev.h.shape()) + " for " + std::to_string(h) + " units");
  }
  Tensor gates = ops::add(x_proj, ops::matmul(prev.h, w.w_h));
  Tensor i = ops::sigmoid(ops::add(ops::slice_last(gates, 0, h), ops::mul_rowvec(prev.c, w.w_ci)));
  Tensor f = ops::sigmoid(ops::add(ops::slice_last(gates, h, h), ops::mul_rowvec(prev.c, w.w_cf)));
  Tensor g = ops::tanh(ops::slice_last(gates, 2 * h, h));
  Tensor c = ops::add(ops::mul(f, prev.c), ops::mul(i, g));
  Tensor o = ops::sigmoid(ops::add(ops::slice_last(gates, 3 * h, h), ops::mul_rowvec(c, w.w_co)));
  return {ops::mul(o, ops::tanh(c)), c};
}

LSTMState lstm_peephole_step(const Tensor& x_t, const LSTMState& prev, const LSTMWeights& w) {
  return lstm_peephole_step_projected(ops::affine(x_t, w.w_x, w.b), prev, w);
}

Tensor lstm(const Tensor& x, const LSTMWeights& w, const std::vector<std::size_t>& lengths, bool reverse) {
  if (x.rank() != 3) throw DimensionError("lstm: expected [B x S x D], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2), h = w.units();
  if (lengths.size() != b) throw DimensionError("lstm: " + std::to_string(lengths.size()) + " lengths for batch " +
                                                std::to_string(b));
  for (auto len : lengths) {
    if (len == 0 || len > s) throw DimensionError("lstm: sequence length " + std::to_string(len) + " outside 1.." +
                                                  std::to_string(s));
  }
  Tensor proj = ops::reshape(ops::affine(ops::reshape(x, {b * s, d}), w.w_x, w.b), {b, s, 4 * h});
  LSTMState state = zero_state(b, h);
  std::vector<Tensor> outputs(s);
  for (std::size_t k = 0; k < s; ++k) {
    const std::size_t t = reverse ? s - 1 - k : k;
    LSTMState next = lstm_peephole_step_projected(ops::time_slice(proj, t), state, w);
    if (reverse) {
      bool any_padded = false;
      std::vector<double> keep(b * h), hold(b * h);
      for (std::size_t i = 0; i < b; ++i) {
        const bool valid = t < lengths[i];
        any_padded = any_padded || !valid;
        std::fill_n(keep.begin() + i * h, h, valid ? 1.0 : 0.0);
        std::fill_n(hold.begin() + i * h, h, valid ? 0.0 : 1.0);
      }
      if (any_padded) {
        Tensor mk = Tensor::from({b, h}, std::move(keep));
        Tensor mh = Tensor::from({b, h}, std::move(hold));
        next.h = ops::add(ops::mul(next.h, mk), ops::mul(state.h, mh));
        next.c = ops::add(ops::mul(next.c, mk), ops::mul(state.c, mh));
      }
    }
    state = next;
    outputs[t] = state.h;
  }
  return ops::stack_time(outputs);
}

Tensor bilstm(const Tensor& x, const BiLSTMWeights& w, const std::vector<std::size_t>& lengths) {
  if (x.rank() != 3 || x.dim(1) == 0) throw DimensionError("bilstm: empty sequence");
  return ops::concat_last({lstm(x, w.forward, lengths, false), lstm(x, w.backward, lengths, true)});
}

std::vector<bool> valid_rows(const Shape& shape, const std::vector<std::size_t>& lengths) {
  if (shape.size() < 3 || shape[0] != lengths.size()) {
    throw DimensionError("length mask: " + std::to_string(lengths.size()) + " lengths for tensor " +
                         shape_str(shape));
  }
  const std::size_t t_len = shape[1];
  std::size_t inner = 1;
  for (std::size_t a = 2; a + 1 < shape.size(); ++a) inner *= shape[a];
  std::vector<bool> rows;
  rows.reserve(shape[0] * t_len * inner);
  for (std::size_t b = 0; b < shape[0]; ++b)
    for (std::size_t t = 0; t < t_len; ++t) rows.insert(rows.end(), inner, t < lengths[b]);
  return rows;
}

Tensor batchnorm(const Tensor& x, BatchNormState& state, const ForwardContext& ctx) {
  std::vector<bool> rows;
  if (!ctx.lengths.empty()) rows = valid_rows(x.shape(), ctx.lengths);
  const std::vector<bool>* mask = ctx.lengths.empty() ? nullptr : &rows;
  if (ctx.mode == Mode::infer) {
    return ops::batch_norm_infer(x, state.gamma, state.beta, state.running_mean.data(), state.running_var.data(),
                                 state.eps, mask);
  }
  ops::ChannelMoments moments;
  Tensor y = ops::batch_norm_train(x, state.gamma, state.beta, state.eps, &moments, mask);
  if (ctx.update_running_stats) {
    const double m = state.momentum;
    const double unbias = static_cast<double>(moments.count) / static_cast<double>(moments.count - 1);
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    for (std::size_t j = 0; j < rm.size(); ++j) {
      rm[j] = m * rm[j] + (1.0 - m) * moments.mean[j];
      rv[j] = m * rv[j] + (1.0 - m) * moments.var[j] * unbias;
    }
  }
  return y;
}

Tensor dropout(const Tensor& x, const DropoutSpec& spec, Rng* rng) {
  if (!(spec.keep_prob > 0.0 && spec.keep_prob <= 1.0)) {
    throw std::invalid_argument("dropout keep probability must lie in (0, 1]");
  }
  if (spec.keep_prob == 1.0) return x;
  if (spec.mode == Mode::infer) {
    return spec.style == DropoutStyle::inverted ? x : ops::scale(x, spec.keep_prob);
  }
  if (!rng) throw std::invalid_argument("train-mode dropout needs a random generator");
  const double on = spec.style == DropoutStyle::inverted ? 1.0 / spec.keep_prob : 1.0;
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = uniform01(*rng) < spec.keep_prob ? on : 0.0;
  return ops::mul(x, Tensor::from(x.shape(), std::move(mask)));
}

Tensor dropout(const Tensor& x, const ForwardContext& ctx) {
  return dropout(x, DropoutSpec{ctx.keep_prob, ctx.mode, DropoutStyle::inverted}, ctx.rng);
}

Tensor conv_block(const Tensor& x, ConvBlockWeights& w, const ForwardContext& ctx) {
  Tensor y = ops::conv2d(x, w.filters, Tensor(), w.conv);
  if (ctx.lengths.empty() || w.conv.stride_h == 1) return dropout(ops::relu(batchnorm(y, w.bn, ctx)), ctx);
  ForwardContext reduced = ctx;
  for (auto& len : reduced.lengths) len = (len + w.conv.stride_h - 1) / w.conv.stride_h;
  return dropout(ops::relu(batchnorm(y, w.bn, reduced)), reduced);
}

Tensor residual_block(const Tensor& x, ResidualBlockWeights& w, const ForwardContext& ctx) {
  const std::size_t cin = x.shape().back();
  const std::size_t k = w.second.filters.dim(0);
  if (w.first.conv.stride_h != 1 || w.first.conv.stride_w != 1 || w.second.conv.stride_h != 1 ||
      w.second.conv.stride_w != 1) {
    throw DimensionError("residual block convolutions must use stride 1x1");
  }
  Tensor skip = x;
  if (w.projection.defined()) {
    if (w.projection.dim(3) != cin) {
      throw DimensionError("residual block: projection expects " + std::to_string(w.projection.dim(3)) +
                           " channels, input has " + std::to_string(cin));
    }
    skip = ops::conv2d(x, w.projection, Tensor(), {1, 1, ops::Padding::same});
  } else if (cin != k) {
    throw DimensionError("residual block: input has " + std::to_string(cin) + " channels, block has " +
                         std::to_string(k) + " and no projection");
  }
  Tensor inner = conv_block(conv_block(x, w.first, ctx), w.second, ctx);
  return ops::add(skip, inner);
}

Tensor dense_block(const Tensor& x, DenseBlockWeights& w, const ForwardContext& ctx) {
  Tensor y;
  if (x.rank() == 3) {
    const std::size_t b = x.dim(0), t = x.dim(1);
    y = ops::reshape(ops::matmul(ops::reshape(x, {b * t, x.dim(2)}), w.w), {b, t, w.w.dim(1)});
  } else {
    y = ops::matmul(x, w.w);
  }
  return dropout(ops::relu(batchnorm(y, w.bn, ctx)), ctx);
}

}  // namespace convattn::layers
