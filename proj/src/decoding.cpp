#include "convattn/decoding.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace convattn {

namespace {

struct Candidate {
  std::size_t parent;
  int token;
  double score;
};

double ranking_score(double log_prob, std::size_t length, bool normalize) {
  return normalize ? log_prob / static_cast<double>(length) : log_prob;
}

}  // namespace

BeamResult beam_search(StepModel& model, const BeamOptions& options) {
  if (options.width == 0) throw std::invalid_argument("beam_search: width must be at least 1");
  if (options.max_len == 0) throw std::invalid_argument("beam_search: max_len must be at least 1");
  const int eos = model.eos();
  const std::size_t vocab = model.vocab_size();

  std::vector<Hypothesis> live{{{}, 0.0, model.initial_state(), false}};
  std::vector<Hypothesis> completed;
  auto rank = [&](const Hypothesis& h) { return ranking_score(h.log_prob, h.tokens.size(), options.length_normalize); };
  auto best_completed = [&]() -> const Hypothesis* {
    const Hypothesis* best = nullptr;
    for (const auto& h : completed) {
      if (!best || rank(h) > rank(*best)) best = &h;
    }
    return best;
  };

  for (std::size_t len = 1; len <= options.max_len && !live.empty(); ++len) {
    std::vector<Candidate> candidates;
    std::vector<StepModel::State> next_states(live.size());
    candidates.reserve(live.size() * vocab);
    for (std::size_t i = 0; i < live.size(); ++i) {
      const int prev = live[i].tokens.empty() ? -1 : live[i].tokens.back();
      const auto log_probs = model.step(live[i].state, prev, &next_states[i]);
      if (log_probs.size() != vocab) throw std::logic_error("beam_search: step returned wrong vocabulary size");
      for (std::size_t v = 0; v < vocab; ++v) {
        const double score = live[i].log_prob + log_probs[v];
        if (static_cast<int>(v) != eos) {
          candidates.push_back({i, static_cast<int>(v), score});
        } else if (score > -std::numeric_limits<double>::infinity()) {
          Hypothesis done{live[i].tokens, score, next_states[i], true};
          done.tokens.push_back(eos);
          completed.push_back(std::move(done));
        }
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(), [&](const Candidate& a, const Candidate& b) {
      const double ra = ranking_score(a.score, len, options.length_normalize);
      const double rb = ranking_score(b.score, len, options.length_normalize);
      if (ra != rb) return ra > rb;
      return a.token < b.token;
    });

    std::vector<Hypothesis> next;
    for (std::size_t r = 0; r < candidates.size() && next.size() < options.width; ++r) {
      const auto& c = candidates[r];
      Hypothesis h{live[c.parent].tokens, c.score, next_states[c.parent], false};
      h.tokens.push_back(c.token);
      next.push_back(std::move(h));
    }
    live = std::move(next);

    // Scores only fall as hypotheses grow, so once the best completed
    // hypothesis outranks every live one the answer is settled.
    if (const Hypothesis* best = best_completed(); best && !options.length_normalize) {
      const bool settled = std::all_of(live.begin(), live.end(),
                                       [&](const Hypothesis& h) { return h.log_prob <= best->log_prob; });
      if (settled) break;
    }
  }

  BeamResult result;
  const Hypothesis* best = best_completed();
  if (!best) {
    result.truncated = true;
    for (const auto& h : live) {
      if (!best || rank(h) > rank(*best)) best = &h;
    }
  }
  if (!best) throw std::logic_error("beam_search: no hypothesis survived");
  result.tokens = best->tokens;
  if (best->finished) result.tokens.pop_back();
  result.score = best->log_prob;
  return result;
}

BeamResult greedy_search(StepModel& model, std::size_t max_len) {
  if (max_len == 0) throw std::invalid_argument("greedy_search: max_len must be at least 1");
  BeamResult result;
  StepModel::State state = model.initial_state();
  int prev = -1;
  for (std::size_t len = 1; len <= max_len; ++len) {
    StepModel::State next;
    const auto lp = model.step(state, prev, &next);
    const auto best = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    result.score += lp[static_cast<std::size_t>(best)];
    if (best == model.eos()) return result;
    result.tokens.push_back(best);
    state = std::move(next);
    prev = best;
  }
  result.truncated = true;
  return result;
}

Seq2SeqStepModel::Seq2SeqStepModel(const Seq2Seq& model, EncoderOutput encoded)
    : model_(model), encoded_(std::move(encoded)) {
  if (encoded_.batch() != 1) throw DimensionError("Seq2SeqStepModel: expects a single encoded utterance");
}

std::size_t Seq2SeqStepModel::vocab_size() const { return model_.config().decoder.vocab_size; }

int Seq2SeqStepModel::eos() const { return static_cast<int>(vocab_size()) - 1; }

StepModel::State Seq2SeqStepModel::initial_state() {
  return std::make_shared<const DecoderState>(model_.initial_state(1));
}

std::vector<double> Seq2SeqStepModel::step(const State& state, int prev_token, State* next) {
  NoGradGuard guard;
  const auto& s = *static_cast<const DecoderState*>(state.get());
  StepOutput out = model_.decode_step(encoded_, {prev_token}, s, layers::ForwardContext{});
  if (next) *next = std::make_shared<const DecoderState>(std::move(out.state));
  return out.log_probs.to_vector();
}

BeamResult decode_utterance(Seq2Seq& model, const Tensor& features_ftc, const BeamOptions& options) {
  if (features_ftc.rank() != 3) {
    throw DimensionError("decode_utterance: expected [F x T x C] features, got " + shape_str(features_ftc.shape()));
  }
  const std::size_t frames = features_ftc.dim(1);
  EncoderOutput enc;
  {
    NoGradGuard guard;
    Shape batched{1, features_ftc.dim(0), frames, features_ftc.dim(2)};
    enc = model.encode(ops::reshape(features_ftc, batched), {frames}, layers::ForwardContext{});
  }
  BeamOptions opt = options;
  if (opt.max_len == 0) opt.max_len = 2 * enc.lengths[0];
  Seq2SeqStepModel step_model(model, std::move(enc));
  return beam_search(step_model, opt);
}

}  // namespace convattn
