#include "convattn/model.hpp"

#include <string>

#include "convattn/errors.hpp"

namespace convattn {

using layers::ForwardContext;

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.encoder.conv_maps = 8;
  c.encoder.residual_blocks = 1;
  c.encoder.residual_maps = 4;
  c.encoder.dense_units = 16;
  c.encoder.lstm_layers = 1;
  c.encoder.lstm_units = 8;
  c.decoder.lstm_units = 8;
  c.decoder.attention_units = 8;
  c.decoder.vocab_size = 6;
  return c;
}

void ModelConfig::validate() const {
  const std::pair<const char*, std::size_t> counts[] = {
      {"freq_bins", encoder.freq_bins},         {"in_channels", encoder.in_channels},
      {"conv_maps", encoder.conv_maps},         {"kernel", encoder.kernel},
      {"time_stride", encoder.time_stride},     {"residual_maps", encoder.residual_maps},
      {"dense_units", encoder.dense_units},     {"lstm_layers", encoder.lstm_layers},
      {"lstm_units", encoder.lstm_units},       {"decoder_units", decoder.lstm_units},
      {"attention_units", decoder.attention_units}, {"vocab_size", decoder.vocab_size},
  };
  for (const auto& [key, value] : counts) {
    if (value == 0) throw ConfigError(std::string("model config: ") + key + " must be positive");
  }
  if (encoder.kernel % 2 == 0) throw ConfigError("model config: kernel must be odd");
  if (decoder.vocab_size < 2) throw ConfigError("model config: vocab_size must include a label and end-of-sequence");
}

std::size_t encoder_length(std::size_t frames, std::size_t time_stride) {
  return (frames + time_stride - 1) / time_stride;
}

namespace {

layers::BatchNormState add_batchnorm(ModelParams& p, const std::string& prefix, std::size_t c) {
  layers::BatchNormState bn;
  bn.gamma = p.add(prefix + ".gamma", {c}, ParamKind::bn_gamma);
  bn.beta = p.add(prefix + ".beta", {c}, ParamKind::bn_beta);
  bn.running_mean = p.add_buffer(prefix + ".running_mean", {c}, 0.0);
  bn.running_var = p.add_buffer(prefix + ".running_var", {c}, 1.0);
  return bn;
}

layers::ConvBlockWeights add_conv_block(ModelParams& p, const std::string& prefix, std::size_t maps,
                                        std::size_t kernel, std::size_t cin, std::size_t time_stride) {
  layers::ConvBlockWeights w;
  w.filters = p.add(prefix + ".filters", {maps, kernel, kernel, cin}, ParamKind::weight, kernel * kernel * cin,
                    kernel * kernel * maps);
  w.bn = add_batchnorm(p, prefix + ".bn", maps);
  w.conv = {time_stride, 1, ops::Padding::same};
  return w;
}

layers::LSTMWeights add_lstm(ModelParams& p, const std::string& prefix, std::size_t din, std::size_t h) {
  layers::LSTMWeights w;
  w.w_x = p.add(prefix + ".w_x", {din, 4 * h}, ParamKind::lstm_weight, din, 4 * h);
  w.w_h = p.add(prefix + ".w_h", {h, 4 * h}, ParamKind::lstm_weight, h, 4 * h);
  w.b = p.add(prefix + ".b", {4 * h}, ParamKind::bias);
  w.w_ci = p.add(prefix + ".w_ci", {h}, ParamKind::lstm_weight);
  w.w_cf = p.add(prefix + ".w_cf", {h}, ParamKind::lstm_weight);
  w.w_co = p.add(prefix + ".w_co", {h}, ParamKind::lstm_weight);
  return w;
}

}  // namespace

Seq2Seq::Seq2Seq(ModelConfig config) : config_(config) {
  config_.validate();
  build();
}

void Seq2Seq::build() {
  const auto& e = config_.encoder;
  const auto& d = config_.decoder;
  conv_ = add_conv_block(params_, "enc.conv", e.conv_maps, e.kernel, e.in_channels, e.time_stride);
  std::size_t channels = e.conv_maps;
  for (std::size_t i = 0; i < e.residual_blocks; ++i) {
    const std::string prefix = "enc.res" + std::to_string(i);
    layers::ResidualBlockWeights block;
    block.first = add_conv_block(params_, prefix + ".conv1", e.residual_maps, e.kernel, channels, 1);
    block.second = add_conv_block(params_, prefix + ".conv2", e.residual_maps, e.kernel, e.residual_maps, 1);
    if (channels != e.residual_maps) {
      block.projection = params_.add(prefix + ".proj", {e.residual_maps, 1, 1, channels}, ParamKind::weight, channels,
                                     e.residual_maps);
    }
    residual_.push_back(block);
    channels = e.residual_maps;
  }
  const std::size_t flat = e.freq_bins * channels;
  dense_.w = params_.add("enc.dense.w", {flat, e.dense_units}, ParamKind::weight, flat, e.dense_units);
  dense_.bn = add_batchnorm(params_, "enc.dense.bn", e.dense_units);
  std::size_t width = e.dense_units;
  for (std::size_t l = 0; l < e.lstm_layers; ++l) {
    const std::string prefix = "enc.lstm" + std::to_string(l);
    encoder_lstm_.push_back({add_lstm(params_, prefix + ".fwd", width, e.lstm_units),
                             add_lstm(params_, prefix + ".bwd", width, e.lstm_units)});
    width = e.output_width();
  }
  decoder_lstm_ = add_lstm(params_, "dec.lstm", d.vocab_size + d.attention_units, d.lstm_units);
  w_a_ = params_.add("dec.attn.w_a", {d.lstm_units, width}, ParamKind::weight, d.lstm_units, width);
  w_c_ = params_.add("dec.attn.w_c", {width + d.lstm_units, d.attention_units}, ParamKind::weight,
                     width + d.lstm_units, d.attention_units);
  w_s_ = params_.add("dec.out.w_s", {d.attention_units, d.vocab_size}, ParamKind::weight, d.attention_units,
                     d.vocab_size);
}

EncoderOutput Seq2Seq::encode(const Tensor& features, const std::vector<std::size_t>& lengths,
                              const ForwardContext& ctx) {
  const auto& e = config_.encoder;
  if (features.rank() != 4 || features.dim(1) != e.freq_bins || features.dim(3) != e.in_channels) {
    throw DimensionError("encode: expected [B x " + std::to_string(e.freq_bins) + " x T x " +
                         std::to_string(e.in_channels) + "] features, got " + shape_str(features.shape()));
  }
  const std::size_t batch = features.dim(0), frames = features.dim(2), freq = e.freq_bins, ch = e.in_channels;
  if (lengths.size() != batch) {
    throw DimensionError("encode: " + std::to_string(lengths.size()) + " lengths for batch of " +
                         std::to_string(batch));
  }
  for (auto len : lengths) {
    if (len == 0) throw DimensionError("encode: zero-length utterance");
    if (len > frames) throw DimensionError("encode: length " + std::to_string(len) + " exceeds padded extent");
  }

  // Time-major copy [B x T' x F x C] with T' rounded up to a multiple of the
  // stride, so every strided window starts at a multiple of the stride no
  // matter how much padding the batch carries.
  const std::size_t steps = encoder_length(frames, e.time_stride);
  const std::size_t padded = steps * e.time_stride;
  std::vector<double> x(batch * padded * freq * ch, 0.0);
  const auto in = features.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t f = 0; f < freq; ++f)
      for (std::size_t t = 0; t < lengths[b]; ++t)
        for (std::size_t c = 0; c < ch; ++c)
          x[((b * padded + t) * freq + f) * ch + c] = in[((b * freq + f) * frames + t) * ch + c];
  Tensor h = Tensor::from({batch, padded, freq, ch}, std::move(x));

  ForwardContext local = ctx;
  local.lengths = lengths;
  h = layers::conv_block(h, conv_, local);
  EncoderOutput out;
  for (auto len : lengths) out.lengths.push_back(encoder_length(len, e.time_stride));
  local.lengths = out.lengths;
  for (auto& block : residual_) h = layers::residual_block(h, block, local);
  h = ops::reshape(h, {batch, steps, freq * h.dim(3)});
  h = layers::dense_block(h, dense_, local);
  for (const auto& layer : encoder_lstm_) h = layers::bilstm(h, layer, out.lengths);
  out.states = h;
  out.valid.reserve(batch * steps);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t s = 0; s < steps; ++s) out.valid.push_back(s < out.lengths[b]);
  return out;
}

DecoderState Seq2Seq::initial_state(std::size_t batch) const {
  return {layers::zero_state(batch, config_.decoder.lstm_units),
          Tensor::zeros({batch, config_.decoder.attention_units})};
}

StepOutput Seq2Seq::decode_step(const EncoderOutput& enc, const std::vector<int>& prev_tokens,
                                const DecoderState& state, const ForwardContext& ctx) const {
  const std::size_t batch = enc.batch(), steps = enc.steps(), width = enc.states.dim(2);
  const std::size_t vocab = config_.decoder.vocab_size;
  if (prev_tokens.size() != batch) {
    throw DimensionError("decode_step: " + std::to_string(prev_tokens.size()) + " tokens for batch of " +
                         std::to_string(batch));
  }
  std::vector<double> onehot(batch * vocab, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const int tok = prev_tokens[b];
    if (tok >= static_cast<int>(vocab)) {
      throw std::out_of_range("decode_step: token " + std::to_string(tok) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
    if (tok >= 0) onehot[b * vocab + static_cast<std::size_t>(tok)] = 1.0;
  }
  Tensor input = ops::concat_last({Tensor::from({batch, vocab}, std::move(onehot)), state.attentional});
  layers::LSTMState lstm = layers::lstm_peephole_step(input, state.lstm, decoder_lstm_);

  // score(s) = h^T W_a h_s over encoder positions, masked past each length.
  Tensor query = ops::reshape(ops::matmul(lstm.h, w_a_), {batch, width, 1});
  Tensor scores = ops::reshape(ops::bmm(enc.states, query), {batch, steps});
  Tensor align = ops::masked_softmax(scores, enc.valid);
  Tensor context = ops::reshape(ops::bmm(ops::reshape(align, {batch, 1, steps}), enc.states), {batch, width});
  Tensor attentional = ops::tanh(ops::matmul(ops::concat_last({context, lstm.h}), w_c_));
  attentional = layers::dropout(attentional, ctx);
  Tensor log_probs = ops::log_softmax(ops::matmul(attentional, w_s_));
  return {log_probs, {lstm, attentional}, align, context};
}

TeacherForced Seq2Seq::teacher_forced(const EncoderOutput& enc, const std::vector<std::vector<int>>& targets,
                                      const ForwardContext& ctx) const {
  const std::size_t batch = enc.batch();
  if (targets.size() != batch) {
    throw DimensionError("teacher_forced: " + std::to_string(targets.size()) + " targets for batch of " +
                         std::to_string(batch));
  }
  std::size_t steps = 0;
  for (const auto& t : targets) {
    if (t.empty()) throw std::invalid_argument("teacher_forced: empty target sequence");
    steps = std::max(steps, t.size());
  }
  TeacherForced out;
  out.steps = steps;
  out.targets.assign(batch * steps, -1);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < targets[b].size(); ++t) out.targets[b * steps + t] = targets[b][t];

  DecoderState state = initial_state(batch);
  std::vector<Tensor> per_step;
  per_step.reserve(steps);
  std::vector<int> prev(batch, -1);
  for (std::size_t t = 0; t < steps; ++t) {
    StepOutput step = decode_step(enc, prev, state, ctx);
    per_step.push_back(step.log_probs);
    state = step.state;
    for (std::size_t b = 0; b < batch; ++b) prev[b] = t < targets[b].size() ? targets[b][t] : -1;
  }
  // [B x L x V] flattened to rows b * L + t.
  Tensor stacked = ops::stack_time(per_step);
  out.log_probs = ops::reshape(stacked, {batch * steps, config_.decoder.vocab_size});
  return out;
}

}  // namespace convattn
