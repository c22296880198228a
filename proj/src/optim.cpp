#include "convattn/optim.hpp"

#include <cmath>
#include <stdexcept>

#include "convattn/ops.hpp"
#include "convattn/rng.hpp"

namespace convattn {

Tensor cross_entropy_loss(const Tensor& log_probs, const std::vector<int>& targets) {
  std::size_t valid = 0;
  for (int t : targets) valid += t >= 0;
  if (valid == 0) throw std::invalid_argument("cross_entropy_loss: no valid target positions");
  return ops::scale(ops::sum(ops::pick(log_probs, targets)), -1.0 / static_cast<double>(valid));
}

double gradient_norm(const ModelParams& params) {
  double sq = 0.0;
  for (const auto& p : params.params()) {
    if (!p.value.has_grad()) continue;
    for (double g : p.value.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_gradients(ModelParams& params, double max_norm) {
  for (const auto& p : params.params()) {
    if (p.value.has_grad()) detail::check_finite("gradient of " + p.name, p.value.grad());
  }
  const double norm = gradient_norm(params);
  if (norm <= max_norm) return 1.0;
  const double factor = max_norm / norm;
  for (const auto& p : params.params()) {
    Tensor t = p.value;
    if (!t.has_grad()) continue;
    for (double& g : t.mutable_grad()) g *= factor;
  }
  return factor;
}

void apply_weight_decay(ModelParams& params, double alpha) {
  if (alpha == 0.0) return;
  for (const auto& p : params.params()) {
    if (p.kind != ParamKind::weight && p.kind != ParamKind::lstm_weight) continue;
    Tensor t = p.value;
    auto g = t.mutable_grad();
    const auto w = t.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += alpha * w[i];
  }
}

void init_params(ModelParams& params, std::uint64_t seed) {
  Rng rng = make_rng(seed, "init");
  for (const auto& p : params.params()) {
    Tensor t = p.value;
    auto d = t.mutable_data();
    switch (p.kind) {
      case ParamKind::weight: {
        const double limit = std::sqrt(6.0 / static_cast<double>(p.fan_in + p.fan_out));
        for (auto& x : d) x = uniform(rng, -limit, limit);
        break;
      }
      case ParamKind::lstm_weight:
        for (auto& x : d) x = uniform(rng, -0.1, 0.1);
        break;
      case ParamKind::bias:
      case ParamKind::bn_beta:
        std::fill(d.begin(), d.end(), 0.0);
        break;
      case ParamKind::bn_gamma:
        std::fill(d.begin(), d.end(), 1.0);
        break;
    }
  }
  for (const auto& b : params.buffers()) {
    Tensor t = b.tensor;
    const bool is_var = b.name.size() >= 3 && b.name.compare(b.name.size() - 3, 3, "var") == 0;
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), is_var ? 1.0 : 0.0);
  }
}

namespace {

std::span<const double> require_grad(const Param& p) {
  if (!p.value.has_grad()) throw std::logic_error("optimizer: parameter " + p.name + " has no gradient");
  return p.value.grad();
}

}  // namespace

void sgd_step(ModelParams& params, OptimizerState& opt) {
  for (const auto& p : params.params()) {
    const auto g = require_grad(p);
    Tensor t = p.value;
    auto w = t.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= opt.learning_rate * g[i];
  }
  ++opt.step;
}

void adam_step(ModelParams& params, OptimizerState& opt) {
  const auto& ps = params.params();
  for (const auto& p : ps) require_grad(p);
  if (opt.m.size() != ps.size()) {
    opt.m.assign(ps.size(), {});
    opt.v.assign(ps.size(), {});
  }
  ++opt.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (std::size_t k = 0; k < ps.size(); ++k) {
    Tensor t = ps[k].value;
    const auto g = t.grad();
    auto w = t.mutable_data();
    auto& m = opt.m[k];
    auto& v = opt.v[k];
    if (m.size() != w.size()) {
      m.assign(w.size(), 0.0);
      v.assign(w.size(), 0.0);
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
      v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
      w[i] -= opt.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt.epsilon);
    }
  }
}

void optimizer_step(ModelParams& params, OptimizerState& opt) {
  if (opt.kind == OptimizerKind::adam) {
    adam_step(params, opt);
  } else {
    sgd_step(params, opt);
  }
}

}  // namespace convattn
