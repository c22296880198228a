#include "convattn/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace convattn {

namespace {

thread_local bool g_grad_enabled = true;

struct FaultSpec {
  std::string op;
  double factor = 1.0;
};
thread_local FaultSpec* g_fault = nullptr;

thread_local KinkMonitor* g_kink = nullptr;
thread_local std::uint64_t g_kink_hash = 0;

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
  }
  detail::check_finite("tensor", values);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

TensorImpl& Tensor::impl() const {
  if (!impl_) throw GraphError("use of undefined tensor");
  return *impl_;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& sh = impl().shape;
  if (index.size() != sh.size()) {
    throw DimensionError("index of rank " + std::to_string(index.size()) + " into tensor " + shape_str(sh));
  }
  std::size_t flat = 0, axis = 0;
  for (auto i : index) {
    if (i >= sh[axis]) throw DimensionError("index " + std::to_string(i) + " out of range for axis " +
                                            std::to_string(axis) + " of " + shape_str(sh));
    flat = flat * sh[axis++] + i;
  }
  return impl().data[flat];
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
  return impl().data[0];
}

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw GraphError("tensor has no gradient");
  return impl().grad;
}

std::span<double> Tensor::mutable_grad() {
  impl().ensure_grad();
  return impl().grad;
}

void Tensor::zero_grad() {
  auto& g = impl().grad;
  std::fill(g.begin(), g.end(), 0.0);
}

Tensor Tensor::clone() const {
  auto impl2 = std::make_shared<TensorImpl>();
  impl2->shape = impl().shape;
  impl2->data = impl().data;
  impl2->requires_grad = impl().requires_grad;
  return Tensor(std::move(impl2));
}

Tensor Tensor::detach() const {
  auto t = clone();
  t.set_requires_grad(false);
  return t;
}

void Tensor::backward() const {
  auto& root = impl();
  if (root.data.size() != 1) {
    throw GraphError("backward requires a scalar loss, got shape " + shape_str(root.shape));
  }
  if (root.node && root.node->consumed) {
    throw GraphError("backward invoked twice on the same graph");
  }
  if (!root.requires_grad) {
    throw GraphError("loss does not depend on any tensor that requires grad");
  }

  // Iterative post-order DFS gives a topological order of the recorded nodes.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    if (t->node && next < t->node->inputs.size()) {
      TensorImpl* child = t->node->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(t);
    stack.pop_back();
  }

  root.ensure_grad();
  root.grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (!t->node) continue;
    auto& node = *t->node;
    if (node.consumed) throw GraphError("backward reached a node already consumed: " + node.op);
    t->ensure_grad();
    if (g_fault && g_fault->op == node.op) {
      for (auto& g : t->grad) g *= g_fault->factor;
    }
    for (auto& in : node.inputs) {
      if (in->requires_grad) in->ensure_grad();
    }
    node.backward(*t);
  }

  // Release the tape: saved intermediates and input references go away.
  for (TensorImpl* t : order) {
    if (!t->node) continue;
    t->node->consumed = true;
    t->node->backward = nullptr;
    t->node->inputs.clear();
  }
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_mode_enabled() { return g_grad_enabled; }

namespace detail {

void check_finite(const std::string& op, std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("non-finite value produced by " + op);
  }
}

Tensor make_result(const std::string& op, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl&)> backward) {
  check_finite(op, values);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  bool needs = false;
  if (g_grad_enabled) {
    for (auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    impl->requires_grad = true;
    auto node = std::make_shared<TapeNode>();
    node->op = op;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.impl_ptr());
    node->backward = std::move(backward);
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}

std::vector<double>* input_grad(const TapeNode& node, std::size_t i) {
  auto& in = node.inputs.at(i);
  if (!in->requires_grad) return nullptr;
  in->ensure_grad();
  return &in->grad;
}

}  // namespace detail

ScopedBackwardFault::ScopedBackwardFault(std::string op, double factor) {
  g_fault = new FaultSpec{std::move(op), factor};
}

ScopedBackwardFault::~ScopedBackwardFault() {
  delete g_fault;
  g_fault = nullptr;
}

KinkMonitor::KinkMonitor() : prev_(g_kink) {
  g_kink = this;
  g_kink_hash = 0;
}

KinkMonitor::~KinkMonitor() { g_kink = prev_; }

std::uint64_t KinkMonitor::fingerprint() const { return g_kink_hash; }
void KinkMonitor::reset() { g_kink_hash = 0; }
bool KinkMonitor::active() { return g_kink != nullptr; }

void KinkMonitor::record(std::span<const double> preactivation) {
  std::uint64_t h = g_kink_hash;
  std::uint64_t word = 0;
  std::size_t bit = 0;
  for (double v : preactivation) {
    word = (word << 1) | (v > 0.0 ? 1u : 0u);
    if (++bit == 64) {
      h = mix(h, word);
      word = 0;
      bit = 0;
    }
  }
  h = mix(h, word ^ (bit << 58));
  g_kink_hash = h;
}

}  // namespace convattn
