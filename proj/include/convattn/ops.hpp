#pragma once

#include <cstddef>
#include <vector>

#include "convattn/tensor.hpp"

// Differentiable tensor operations. Every op checks shapes, records a tape
// node when an input requires grad, and raises NumericError on NaN/Inf.
namespace convattn::ops {

enum class Unary { relu, tanh, sigmoid };
enum class Binary { add, sub, mul };

Tensor elementwise(const Tensor& x, Unary kind);
Tensor elementwise(const Tensor& a, const Tensor& b, Binary kind);

inline Tensor relu(const Tensor& x) { return elementwise(x, Unary::relu); }
inline Tensor tanh(const Tensor& x) { return elementwise(x, Unary::tanh); }
inline Tensor sigmoid(const Tensor& x) { return elementwise(x, Unary::sigmoid); }
inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, Binary::add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, Binary::sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, Binary::mul); }

Tensor scale(const Tensor& x, double factor);

// Row broadcasts: x has last extent N, v has shape [N].
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor mul_rowvec(const Tensor& x, const Tensor& v);

// [M x K] * [K x N]
Tensor matmul(const Tensor& a, const Tensor& b);
// x[B x Din] * W[Din x Dout] + b[Dout]
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);
// [B x M x K] * [B x K x N]
Tensor bmm(const Tensor& a, const Tensor& b);

// Softmax family over the last axis, max-subtracted.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
// Entries with valid[i] == false get probability exactly zero. Every row
// needs at least one valid entry. `valid` has one flag per element of x.
Tensor masked_softmax(const Tensor& x, const std::vector<bool>& valid);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);

// Concatenation / slicing along the last axis.
Tensor concat_last(const std::vector<Tensor>& parts);
Tensor slice_last(const Tensor& x, std::size_t start, std::size_t length);

// [B x S x D] -> [B x D] at time t, and the inverse stacking.
Tensor time_slice(const Tensor& x, std::size_t t);
Tensor stack_time(const std::vector<Tensor>& steps);

// x[N x V] -> [N], picking x[i, index[i]]; index < 0 yields 0 with no gradient.
Tensor pick(const Tensor& x, const std::vector<int>& index);

enum class Padding { same, valid };

struct Conv2dOptions {
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  Padding padding = Padding::same;
};

/// Output extent and leading pad along one axis.
struct ConvAxis {
  std::size_t out = 0;
  std::size_t pad_lead = 0;
};
ConvAxis conv_axis(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding);

/// x[B x H x W x Cin] convolved with filters[K x kh x kw x Cin] plus bias[K]
/// (bias may be undefined) -> [B x H' x W' x K].
Tensor conv2d(const Tensor& x, const Tensor& filters, const Tensor& bias, const Conv2dOptions& opt);

/// Per-channel statistics pooled over every row of a [... x C] input.
struct ChannelMoments {
  std::vector<double> mean;
  std::vector<double> var;  // population variance
  std::size_t count = 0;
};

/// Batch normalization with batch statistics over all leading axes of
/// x[... x C]. Writes the batch moments to `moments` when non-null.
/// `valid_rows` (one flag per C-vector) excludes padding from the statistics;
/// excluded rows produce zeros and receive no gradient.
Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                        ChannelMoments* moments = nullptr, const std::vector<bool>* valid_rows = nullptr);

/// Batch normalization with fixed statistics; excluded rows produce zeros.
Tensor batch_norm_infer(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::span<const double> mean,
                        std::span<const double> var, double eps, const std::vector<bool>* valid_rows = nullptr);

}  // namespace convattn::ops
