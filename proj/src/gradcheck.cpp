#include "convattn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace convattn {

double relative_error(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

std::vector<std::string> GradCheckReport::failing(double tolerance) const {
  std::vector<std::string> out;
  for (const auto& t : tensors) {
    if (!(t.max_rel_error < tolerance)) out.push_back(t.name);
  }
  return out;
}

GradCheckReport finite_diff_check(const std::function<Tensor()>& loss, std::span<const NamedTensor> params,
                                  const GradCheckOptions& options) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.set_requires_grad(true);
    if (t.has_grad()) t.zero_grad();
  }
  loss().backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) {
    if (p.tensor.has_grad()) {
      auto g = p.tensor.grad();
      analytic.emplace_back(g.begin(), g.end());
    } else {
      analytic.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  NoGradGuard no_grad;
  std::uint64_t base_pattern = 0;
  {
    KinkMonitor monitor;
    loss();
    base_pattern = monitor.fingerprint();
  }

  auto central = [&](Tensor& t, std::size_t i, double h, bool& kinked) {
    auto data = t.mutable_data();
    const double saved = data[i];
    KinkMonitor monitor;
    data[i] = saved + h;
    const double fp = loss().item();
    const auto pat_plus = monitor.fingerprint();
    monitor.reset();
    data[i] = saved - h;
    const double fm = loss().item();
    const auto pat_minus = monitor.fingerprint();
    data[i] = saved;
    kinked = pat_plus != base_pattern || pat_minus != base_pattern;
    return (fp - fm) / (2.0 * h);
  };
  auto probe = [&](Tensor& t, std::size_t i, double h, bool& kinked) {
    const double coarse = central(t, i, h, kinked);
    if (!options.richardson || kinked) return coarse;
    const double fine = central(t, i, h / 2.0, kinked);
    return (4.0 * fine - coarse) / 3.0;
  };

  GradCheckReport report;
  std::vector<EntryError> all;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor t = params[k].tensor;
    TensorCheck tc;
    tc.name = params[k].name;
    tc.entries = t.numel();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      double h = options.step;
      bool kinked = false;
      double numeric = probe(t, i, h, kinked);
      for (int r = 0; kinked && r < options.kink_retries; ++r) {
        h /= 10.0;
        numeric = probe(t, i, h, kinked);
      }
      if (kinked) {
        ++tc.kink_skipped;
        continue;
      }
      const double a = analytic[k][i];
      const double err = relative_error(a, numeric);
      tc.max_rel_error = std::max(tc.max_rel_error, err);
      all.push_back({tc.name, i, a, numeric, err});
    }
    report.max_rel_error = std::max(report.max_rel_error, tc.max_rel_error);
    report.kink_skipped += tc.kink_skipped;
    report.tensors.push_back(std::move(tc));
  }
  const std::size_t keep = std::min(options.worst_count, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<long>(keep), all.end(),
                    [](const EntryError& a, const EntryError& b) { return a.rel_error > b.rel_error; });
  all.resize(keep);
  report.worst = std::move(all);
  return report;
}

}  // namespace convattn
