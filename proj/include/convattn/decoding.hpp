#pragma once

#include <memory>
#include <vector>

#include "convattn/model.hpp"

namespace convattn {

/// Autoregressive scorer driven by beam search. States are opaque to the
/// search and never mutated once returned.
class StepModel {
 public:
  using State = std::shared_ptr<const void>;

  virtual ~StepModel() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual int eos() const = 0;
  virtual State initial_state() = 0;
  /// Log-probabilities of the next token given the state reached after
  /// prev_token (-1 before the first token). Writes the successor state.
  virtual std::vector<double> step(const State& state, int prev_token, State* next) = 0;
};

struct Hypothesis {
  std::vector<int> tokens;  // includes the final end-of-sequence when finished
  double log_prob = 0.0;
  StepModel::State state;
  bool finished = false;
};

struct BeamOptions {
  std::size_t width = 10;
  std::size_t max_len = 0;  // tokens including end-of-sequence; 0 = caller default
  bool length_normalize = false;
};

struct BeamResult {
  std::vector<int> tokens;  // end-of-sequence stripped
  double score = 0.0;       // summed log-probability (before any normalization)
  bool truncated = false;   // nothing finished within max_len
};

/// Left-to-right beam search. Every live hypothesis is expanded over the
/// whole vocabulary. Its end-of-sequence continuation moves to the completed
/// pool, which never takes a beam slot; the next beam is the top `width`
/// other continuations by score, ties going to the lower token id. Search
/// ends at max_len or once no live hypothesis can beat the best completed
/// one. With width 1 the beam follows the argmax path and returns its best
/// ending, which scores at least as well as greedy_search.
BeamResult beam_search(StepModel& model, const BeamOptions& options);

/// Argmax decoding (lowest id on ties) until end-of-sequence or max_len.
BeamResult greedy_search(StepModel& model, std::size_t max_len);

/// Adapter exposing a trained model on one encoded utterance. Runs in
/// inference mode without recording gradients.
class Seq2SeqStepModel : public StepModel {
 public:
  Seq2SeqStepModel(const Seq2Seq& model, EncoderOutput encoded);

  std::size_t vocab_size() const override;
  int eos() const override;
  State initial_state() override;
  std::vector<double> step(const State& state, int prev_token, State* next) override;

 private:
  const Seq2Seq& model_;
  EncoderOutput encoded_;
};

/// Encodes one utterance ([F x T x C] values in features row-major order) and
/// beam-searches it. max_len 0 means twice the encoder length.
BeamResult decode_utterance(Seq2Seq& model, const Tensor& features_ftc, const BeamOptions& options);

}  // namespace convattn
