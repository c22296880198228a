#include "convattn/params.hpp"

namespace convattn {

const char* to_string(ParamKind kind) {
  switch (kind) {
    case ParamKind::weight: return "weight";
    case ParamKind::lstm_weight: return "lstm_weight";
    case ParamKind::bias: return "bias";
    case ParamKind::bn_gamma: return "bn_gamma";
    case ParamKind::bn_beta: return "bn_beta";
  }
  return "?";
}

Tensor ModelParams::add(std::string name, Shape shape, ParamKind kind, std::size_t fan_in, std::size_t fan_out) {
  if (param_index_.count(name) || buffer_index_.count(name)) throw std::invalid_argument("duplicate tensor name " + name);
  auto t = Tensor::zeros(std::move(shape), true);
  param_index_[name] = params_.size();
  params_.push_back({std::move(name), t, kind, fan_in, fan_out});
  return t;
}

Tensor ModelParams::add_buffer(std::string name, Shape shape, double fill) {
  if (param_index_.count(name) || buffer_index_.count(name)) throw std::invalid_argument("duplicate tensor name " + name);
  auto t = Tensor::full(std::move(shape), fill);
  buffer_index_[name] = buffers_.size();
  buffers_.push_back({std::move(name), t});
  return t;
}

const Param* ModelParams::find(const std::string& name) const {
  auto it = param_index_.find(name);
  return it == param_index_.end() ? nullptr : &params_[it->second];
}

const NamedTensor* ModelParams::find_buffer(const std::string& name) const {
  auto it = buffer_index_.find(name);
  return it == buffer_index_.end() ? nullptr : &buffers_[it->second];
}

Tensor ModelParams::param(const std::string& name) const {
  if (auto* p = find(name)) return p->value;
  throw std::out_of_range("no parameter named " + name);
}

Tensor ModelParams::buffer(const std::string& name) const {
  if (auto* b = find_buffer(name)) return b->tensor;
  throw std::out_of_range("no buffer named " + name);
}

std::vector<NamedTensor> ModelParams::named_params() const {
  std::vector<NamedTensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back({p.name, p.value});
  return out;
}

void ModelParams::zero_grad() {
  for (auto& p : params_) {
    Tensor t = p.value;
    if (t.has_grad()) t.zero_grad();
  }
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

ModelParams ModelParams::clone() const {
  ModelParams out;
  for (const auto& p : params_) {
    auto t = out.add(p.name, p.value.shape(), p.kind, p.fan_in, p.fan_out);
    std::copy(p.value.data().begin(), p.value.data().end(), t.mutable_data().begin());
  }
  for (const auto& b : buffers_) {
    auto t = out.add_buffer(b.name, b.tensor.shape(), 0.0);
    std::copy(b.tensor.data().begin(), b.tensor.data().end(), t.mutable_data().begin());
  }
  return out;
}

}  // namespace convattn
