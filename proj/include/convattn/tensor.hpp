#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace convattn {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible. The message names both shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an op produces NaN or Inf, or when backward is misused.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

struct TensorImpl;

/// One recorded op. Owned by the tensor it produced; holds its inputs alive
/// until backward has run, after which it is released.
struct TapeNode {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Accumulates into the inputs' grad buffers given the output's grad.
  std::function<void(const TensorImpl& out)> backward;
  bool consumed = false;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<TapeNode> node;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

/// Shared handle to an N-dimensional double array with an optional gradient.
/// Copies alias the same storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl().shape; }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t numel() const { return impl().data.size(); }

  std::span<const double> data() const { return impl().data; }
  std::span<double> mutable_data() { return impl().data; }
  double at(std::size_t i) const { return impl().data.at(i); }
  /// Element at a full multi-index (row-major).
  double at(std::initializer_list<std::size_t> index) const;
  double item() const;
  std::vector<double> to_vector() const { return impl().data; }

  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool on) { impl().requires_grad = on; }
  bool has_grad() const { return impl().grad.size() == impl().data.size() && !impl().grad.empty(); }
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  Tensor clone() const;
  Tensor detach() const;
  bool is_leaf() const { return !impl().node; }

  /// Reverse-mode sweep from this scalar. Gradients accumulate into every
  /// reachable tensor with requires_grad; the graph is released afterwards.
  void backward() const;

  TensorImpl& impl() const;
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_mode_enabled();

namespace detail {

/// Builds the output tensor of an op and records the node when any input
/// requires grad and recording is enabled. Checks the values are finite.
Tensor make_result(const std::string& op, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs, std::function<void(const TensorImpl&)> backward);

void check_finite(const std::string& op, std::span<const double> values);

/// Grad buffer of input `i` of the node, or nullptr when that input does not
/// require grad.
std::vector<double>* input_grad(const TapeNode& node, std::size_t i);

}  // namespace detail

/// Test hook: scales the incoming gradient of every node whose op matches
/// `op` by `factor` during backward on this thread. Used to prove the
/// gradient checker fires.
class ScopedBackwardFault {
 public:
  ScopedBackwardFault(std::string op, double factor);
  ~ScopedBackwardFault();
  ScopedBackwardFault(const ScopedBackwardFault&) = delete;
  ScopedBackwardFault& operator=(const ScopedBackwardFault&) = delete;
};

/// Accumulates a fingerprint of every relu sign pattern evaluated on this
/// thread while alive. Two forward passes that cross a relu kink produce
/// different fingerprints.
class KinkMonitor {
 public:
  KinkMonitor();
  ~KinkMonitor();
  KinkMonitor(const KinkMonitor&) = delete;
  KinkMonitor& operator=(const KinkMonitor&) = delete;

  std::uint64_t fingerprint() const;
  void reset();

  static bool active();
  static void record(std::span<const double> preactivation);

 private:
  KinkMonitor* prev_;
};

}  // namespace convattn
