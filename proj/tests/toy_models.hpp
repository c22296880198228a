#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>

#include "convattn/decoding.hpp"
#include "convattn/rng.hpp"

namespace convattn::toy {

using Prefix = std::vector<int>;

// Next-token distribution is an arbitrary function of the whole prefix,
// drawn lazily and memoized, so beam search gets no structural help.
class RandomToyModel : public StepModel {
 public:
  RandomToyModel(std::size_t vocab, std::uint64_t seed, double sharpness)
      : vocab_(vocab), seed_(seed), sharpness_(sharpness) {}

  std::size_t vocab_size() const override { return vocab_; }
  int eos() const override { return static_cast<int>(vocab_) - 1; }
  State initial_state() override { return std::make_shared<const Prefix>(); }

  std::vector<double> step(const State& state, int prev_token, State* next) override {
    auto prefix = *static_cast<const Prefix*>(state.get());
    if (prev_token >= 0) prefix.push_back(prev_token);
    ++calls;
    if (next) *next = std::make_shared<const Prefix>(prefix);
    return distribution(prefix);
  }

  const std::vector<double>& distribution(const Prefix& prefix) {
    auto it = table_.find(prefix);
    if (it != table_.end()) return it->second;
    std::uint64_t h = seed_;
    for (int t : prefix) h = splitmix64(h ^ static_cast<std::uint64_t>(t + 17));
    Rng rng(splitmix64(h + prefix.size()));
    std::vector<double> logits(vocab_);
    for (auto& l : logits) l = sharpness_ * normal(rng);
    double mx = *std::max_element(logits.begin(), logits.end()), z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    for (auto& l : logits) l = l - mx - std::log(z);
    return table_.emplace(prefix, logits).first->second;
  }

  std::size_t calls = 0;

 private:
  std::size_t vocab_;
  std::uint64_t seed_;
  double sharpness_;
  std::map<Prefix, std::vector<double>> table_;
};

struct Best {
  Prefix tokens;
  double score = -INFINITY;
};

// Every sequence ending in end-of-sequence within max_len tokens.
inline Best exhaustive(RandomToyModel& m, std::size_t max_len) {
  Best best;
  std::function<void(Prefix&, double)> walk = [&](Prefix& prefix, double score) {
    const auto lp = m.distribution(prefix);
    for (std::size_t v = 0; v < lp.size(); ++v) {
      const double s = score + lp[v];
      if (static_cast<int>(v) == m.eos()) {
        if (s > best.score) best = {prefix, s};
      } else if (prefix.size() + 1 < max_len) {
        prefix.push_back(static_cast<int>(v));
        walk(prefix, s);
        prefix.pop_back();
      }
    }
  };
  Prefix p;
  walk(p, 0.0);
  return best;
}

inline double replay(RandomToyModel& m, const Prefix& tokens) {
  double s = 0.0;
  Prefix p;
  for (int t : tokens) {
    s += m.distribution(p)[std::size_t(t)];
    p.push_back(t);
  }
  return s + m.distribution(p)[std::size_t(m.eos())];
}

}  // namespace convattn::toy
