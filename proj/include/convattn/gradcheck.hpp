#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "convattn/tensor.hpp"

namespace convattn {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // A probe whose +h/-h evaluations see a different relu sign pattern than
  // the base point straddles a kink; the step is divided by 10 and retried.
  int kink_retries = 3;
  // When set, each estimate is (4 D(h/2) - D(h)) / 3 from two central
  // differences D, cancelling the h^2 error term so a larger h (and hence
  // less rounding noise) can be used.
  bool richardson = false;
  std::size_t worst_count = 10;
};

struct EntryError {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct TensorCheck {
  std::string name;
  std::size_t entries = 0;
  std::size_t kink_skipped = 0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  std::vector<EntryError> worst;  // descending by rel_error
  double max_rel_error = 0.0;
  std::size_t kink_skipped = 0;

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
  std::vector<std::string> failing(double tolerance) const;
};

/// |a - b| / max(|a|, |b|, 1e-8)
double relative_error(double a, double b);

/// Compares reverse-mode gradients of `loss` against central differences
/// (f(t+h) - f(t-h)) / 2h for every entry of every tensor in `params`.
/// `loss` must rebuild its graph from the current parameter values on every
/// call and be deterministic.
GradCheckReport finite_diff_check(const std::function<Tensor()>& loss, std::span<const NamedTensor> params,
                                  const GradCheckOptions& options = {});

}  // namespace convattn
