#pragma once

#include <cstddef>
#include <vector>

#include "convattn/layers.hpp"
#include "convattn/params.hpp"

namespace convattn {

struct EncoderConfig {
  std::size_t freq_bins = 41;
  std::size_t in_channels = 3;
  std::size_t conv_maps = 128;
  std::size_t kernel = 3;
  std::size_t time_stride = 3;
  std::size_t residual_blocks = 3;
  std::size_t residual_maps = 64;
  std::size_t dense_units = 1024;
  std::size_t lstm_layers = 3;
  std::size_t lstm_units = 256;  // per direction

  std::size_t output_width() const { return 2 * lstm_units; }
};

struct DecoderConfig {
  std::size_t lstm_units = 256;
  std::size_t attention_units = 256;
  std::size_t vocab_size = 62;  // labels plus end-of-sequence
};

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;

  /// The smallest configuration that still has every component.
  static ModelConfig tiny();
  void validate() const;  // throws ConfigError on a zero count
  bool operator==(const ModelConfig&) const = default;
};

/// Encoder time steps for T input frames.
std::size_t encoder_length(std::size_t frames, std::size_t time_stride = 3);

struct EncoderOutput {
  Tensor states;                     // [B x S' x 2E]
  std::vector<std::size_t> lengths;  // valid encoder steps per utterance
  std::vector<bool> valid;           // [B x S'] attention mask
  std::size_t batch() const { return states.dim(0); }
  std::size_t steps() const { return states.dim(1); }
};

struct DecoderState {
  layers::LSTMState lstm;  // [B x H] each
  Tensor attentional;      // [B x A], fed back as input
};

struct StepOutput {
  Tensor log_probs;  // [B x V]
  DecoderState state;
  Tensor alignment;  // [B x S']
  Tensor context;    // [B x 2E]
};

struct TeacherForced {
  Tensor log_probs;          // [(B * L) x V], row b * L + t
  std::vector<int> targets;  // same rows; -1 marks padding
  std::size_t steps = 0;     // L
};

/// Convolutional encoder (conv block, residual blocks, dense block, BiLSTM
/// stack) with an attention decoder using bilinear scores and input feeding.
///
/// Parameters live in one ModelParams collection; the layer weight structs
/// below are handles into it, so loading values into params() updates the
/// model in place.
class Seq2Seq {
 public:
  explicit Seq2Seq(ModelConfig config);
  Seq2Seq(const Seq2Seq&) = delete;
  Seq2Seq& operator=(const Seq2Seq&) = delete;
  Seq2Seq(Seq2Seq&&) = default;
  Seq2Seq& operator=(Seq2Seq&&) = default;

  const ModelConfig& config() const { return config_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

  /// features: [B x F x T x C] zero-padded past each utterance's length.
  EncoderOutput encode(const Tensor& features, const std::vector<std::size_t>& lengths,
                       const layers::ForwardContext& ctx);

  /// Zero LSTM state and zero attentional vector.
  DecoderState initial_state(std::size_t batch) const;

  /// One decoder step. prev_tokens[b] < 0 is the start symbol (zero one-hot).
  StepOutput decode_step(const EncoderOutput& enc, const std::vector<int>& prev_tokens, const DecoderState& state,
                         const layers::ForwardContext& ctx) const;

  /// Runs the decoder over ground-truth prefixes. Each target must already
  /// end with the end-of-sequence id.
  TeacherForced teacher_forced(const EncoderOutput& enc, const std::vector<std::vector<int>>& targets,
                               const layers::ForwardContext& ctx) const;

 private:
  void build();

  ModelConfig config_;
  ModelParams params_;
  layers::ConvBlockWeights conv_;
  std::vector<layers::ResidualBlockWeights> residual_;
  layers::DenseBlockWeights dense_;
  std::vector<layers::BiLSTMWeights> encoder_lstm_;
  layers::LSTMWeights decoder_lstm_;
  Tensor w_a_;  // [H x 2E]
  Tensor w_c_;  // [(2E + H) x A]
  Tensor w_s_;  // [A x V]
};

}  // namespace convattn
