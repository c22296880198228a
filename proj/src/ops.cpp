#include "convattn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace convattn::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

using detail::make_result;

const std::vector<double>& input_data(const TensorImpl& out, std::size_t i) { return out.node->inputs[i]->data; }
std::vector<double>* input_grad(const TensorImpl& out, std::size_t i) { return detail::input_grad(*out.node, i); }

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
  }
}

std::size_t last_dim(const Tensor& x) { return x.shape().back(); }

}  // namespace

Tensor elementwise(const Tensor& x, Unary kind) {
  const auto in = x.data();
  std::vector<double> y(in.size());
  switch (kind) {
    case Unary::relu:
      if (KinkMonitor::active()) KinkMonitor::record(in);
      for (std::size_t i = 0; i < in.size(); ++i) y[i] = in[i] > 0.0 ? in[i] : 0.0;
      return make_result("relu", x.shape(), std::move(y), {x}, [](const TensorImpl& out) {
        if (auto* g = input_grad(out, 0)) {
          const auto& xin = input_data(out, 0);
          for (std::size_t i = 0; i < xin.size(); ++i) {
            if (xin[i] > 0.0) (*g)[i] += out.grad[i];
          }
        }
      });
    case Unary::tanh:
      for (std::size_t i = 0; i < in.size(); ++i) y[i] = std::tanh(in[i]);
      return make_result("tanh", x.shape(), std::move(y), {x}, [](const TensorImpl& out) {
        if (auto* g = input_grad(out, 0)) {
          for (std::size_t i = 0; i < out.data.size(); ++i) (*g)[i] += out.grad[i] * (1.0 - out.data[i] * out.data[i]);
        }
      });
    case Unary::sigmoid:
      for (std::size_t i = 0; i < in.size(); ++i) {
        // Split by sign so exp never overflows.
        if (in[i] >= 0.0) {
          y[i] = 1.0 / (1.0 + std::exp(-in[i]));
        } else {
          const double e = std::exp(in[i]);
          y[i] = e / (1.0 + e);
        }
      }
      return make_result("sigmoid", x.shape(), std::move(y), {x}, [](const TensorImpl& out) {
        if (auto* g = input_grad(out, 0)) {
          for (std::size_t i = 0; i < out.data.size(); ++i) (*g)[i] += out.grad[i] * out.data[i] * (1.0 - out.data[i]);
        }
      });
  }
  throw std::logic_error("unknown unary kind");
}

Tensor elementwise(const Tensor& a, const Tensor& b, Binary kind) {
  const char* name = kind == Binary::add ? "add" : kind == Binary::sub ? "sub" : "mul";
  require_same_shape(name, a, b);
  const auto x = a.data();
  const auto z = b.data();
  std::vector<double> y(x.size());
  switch (kind) {
    case Binary::add:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + z[i];
      return make_result(name, a.shape(), std::move(y), {a, b}, [](const TensorImpl& out) {
        for (std::size_t k = 0; k < 2; ++k) {
          if (auto* g = input_grad(out, k)) {
            for (std::size_t i = 0; i < out.grad.size(); ++i) (*g)[i] += out.grad[i];
          }
        }
      });
    case Binary::sub:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] - z[i];
      return make_result(name, a.shape(), std::move(y), {a, b}, [](const TensorImpl& out) {
        if (auto* g = input_grad(out, 0)) {
          for (std::size_t i = 0; i < out.grad.size(); ++i) (*g)[i] += out.grad[i];
        }
        if (auto* g = input_grad(out, 1)) {
          for (std::size_t i = 0; i < out.grad.size(); ++i) (*g)[i] -= out.grad[i];
        }
      });
    case Binary::mul:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * z[i];
      return make_result(name, a.shape(), std::move(y), {a, b}, [](const TensorImpl& out) {
        const auto& xa = input_data(out, 0);
        const auto& xb = input_data(out, 1);
        if (auto* g = input_grad(out, 0)) {
          for (std::size_t i = 0; i < out.grad.size(); ++i) (*g)[i] += out.grad[i] * xb[i];
        }
        if (auto* g = input_grad(out, 1)) {
          for (std::size_t i = 0; i < out.grad.size(); ++i) (*g)[i] += out.grad[i] * xa[i];
        }
      });
  }
  throw std::logic_error("unknown binary kind");
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> y(x.data().begin(), x.data().end());
  for (auto& v : y) v *= factor;
  return make_result("scale", x.shape(), std::move(y), {x}, [factor](const TensorImpl& out) {
    if (auto* g = input_grad(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*g)[i] += out.grad[i] * factor;
    }
  });
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  require_rank("add_rowvec", v, 1);
  const std::size_t n = last_dim(x);
  if (v.dim(0) != n) {
    throw DimensionError("add_rowvec: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
  }
  std::vector<double> y(x.data().begin(), x.data().end());
  const auto vv = v.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += vv[i % n];
  return make_result("add_rowvec", x.shape(), std::move(y), {x, v}, [n](const TensorImpl& out) {
    if (auto* g = input_grad(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*g)[i] += out.grad[i];
    }
    if (auto* g = input_grad(out, 1)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*g)[i % n] += out.grad[i];
    }
  });
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  require_rank("mul_rowvec", v, 1);
  const std::size_t n = last_dim(x);
  if (v.dim(0) != n) {
    throw DimensionError("mul_rowvec: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
  }
  std::vector<double> y(x.data().begin(), x.data().end());
  const auto vv = v.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= vv[i % n];
  return make_result("mul_rowvec", x.shape(), std::move(y), {x, v}, [n](const TensorImpl& out) {
    const auto& xd = input_data(out, 0);
    const auto& vd = input_data(out, 1);
    if (auto* g = input_grad(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*g)[i] += out.grad[i] * vd[i % n];
    }
    if (auto* g = input_grad(out, 1)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*g)[i % n] += out.grad[i] * xd[i];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> y(m * n);
  MapM(y.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
  return make_result("matmul", {m, n}, std::move(y), {a, b}, [m, k, n](const TensorImpl& out) {
    MapC dy(out.grad.data(), m, n);
    if (auto* g = input_grad(out, 0)) {
      MapM(g->data(), m, k).noalias() += dy * MapC(input_data(out, 1).data(), k, n).transpose();
    }
    if (auto* g = input_grad(out, 1)) {
      MapM(g->data(), k, n).noalias() += MapC(input_data(out, 0).data(), m, k).transpose() * dy;
    }
  });
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank("affine", x, 2);
  require_rank("affine", w, 2);
  require_rank("affine", b, 1);
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k || b.dim(0) != n) {
    throw DimensionError("affine: x " + shape_str(x.shape()) + ", W " + shape_str(w.shape()) + ", b " +
                         shape_str(b.shape()));
  }
  std::vector<double> y(m * n);
  MapM ym(y.data(), m, n);
  ym.noalias() = MapC(x.data().data(), m, k) * MapC(w.data().data(), k, n);
  ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data().data(), n);
  return make_result("affine", {m, n}, std::move(y), {x, w, b}, [m, k, n](const TensorImpl& out) {
    MapC dy(out.grad.data(), m, n);
    if (auto* g = input_grad(out, 0)) {
      MapM(g->data(), m, k).noalias() += dy * MapC(input_data(out, 1).data(), k, n).transpose();
    }
    if (auto* g = input_grad(out, 1)) {
      MapM(g->data(), k, n).noalias() += MapC(input_data(out, 0).data(), m, k).transpose() * dy;
    }
    if (auto* g = input_grad(out, 2)) {
      Eigen::Map<Eigen::RowVectorXd>(g->data(), n) += dy.colwise().sum();
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_rank("bmm", a, 3);
  require_rank("bmm", b, 3);
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != bs || b.dim(1) != k) {
    throw DimensionError("bmm: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> y(bs * m * n);
  for (std::size_t i = 0; i < bs; ++i) {
    MapM(y.data() + i * m * n, m, n).noalias() =
        MapC(a.data().data() + i * m * k, m, k) * MapC(b.data().data() + i * k * n, k, n);
  }
  return make_result("bmm", {bs, m, n}, std::move(y), {a, b}, [bs, m, k, n](const TensorImpl& out) {
    auto* ga = input_grad(out, 0);
    auto* gb = input_grad(out, 1);
    const auto& ad = input_data(out, 0);
    const auto& bd = input_data(out, 1);
    for (std::size_t i = 0; i < bs; ++i) {
      MapC dy(out.grad.data() + i * m * n, m, n);
      if (ga) MapM(ga->data() + i * m * k, m, k).noalias() += dy * MapC(bd.data() + i * k * n, k, n).transpose();
      if (gb) MapM(gb->data() + i * k * n, k, n).noalias() += MapC(ad.data() + i * m * k, m, k).transpose() * dy;
    }
  });
}

Tensor softmax(const Tensor& x) {
  const std::size_t v = last_dim(x);
  const std::size_t rows = x.numel() / v;
  const auto in = x.data();
  std::vector<double> y(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in.data() + r * v;
    double* yr = y.data() + r * v;
    const double mx = *std::max_element(xr, xr + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < v; ++j) yr[j] /= z;
  }
  return make_result("softmax", x.shape(), std::move(y), {x}, [rows, v](const TensorImpl& out) {
    auto* g = input_grad(out, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = out.data.data() + r * v;
      const double* dy = out.grad.data() + r * v;
      double dot = 0.0;
      for (std::size_t j = 0; j < v; ++j) dot += dy[j] * yr[j];
      for (std::size_t j = 0; j < v; ++j) (*g)[r * v + j] += yr[j] * (dy[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t v = last_dim(x);
  const std::size_t rows = x.numel() / v;
  const auto in = x.data();
  std::vector<double> y(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in.data() + r * v;
    double* yr = y.data() + r * v;
    const double mx = *std::max_element(xr, xr + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(xr[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < v; ++j) yr[j] = xr[j] - lz;
  }
  return make_result("log_softmax", x.shape(), std::move(y), {x}, [rows, v](const TensorImpl& out) {
    auto* g = input_grad(out, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = out.data.data() + r * v;
      const double* dy = out.grad.data() + r * v;
      double total = 0.0;
      for (std::size_t j = 0; j < v; ++j) total += dy[j];
      for (std::size_t j = 0; j < v; ++j) (*g)[r * v + j] += dy[j] - std::exp(yr[j]) * total;
    }
  });
}

Tensor masked_softmax(const Tensor& x, const std::vector<bool>& valid) {
  if (valid.size() != x.numel()) {
    throw DimensionError("masked_softmax: mask has " + std::to_string(valid.size()) + " entries for " +
                         shape_str(x.shape()));
  }
  const std::size_t v = last_dim(x);
  const std::size_t rows = x.numel() / v;
  const auto in = x.data();
  std::vector<double> y(in.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) {
      if (valid[r * v + j]) mx = std::max(mx, in[r * v + j]);
    }
    if (!std::isfinite(mx)) throw DimensionError("masked_softmax: every position of row " + std::to_string(r) + " is masked");
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      if (valid[r * v + j]) z += (y[r * v + j] = std::exp(in[r * v + j] - mx));
    }
    for (std::size_t j = 0; j < v; ++j) y[r * v + j] /= z;
  }
  return make_result("masked_softmax", x.shape(), std::move(y), {x}, [rows, v](const TensorImpl& out) {
    auto* g = input_grad(out, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = out.data.data() + r * v;
      const double* dy = out.grad.data() + r * v;
      double dot = 0.0;
      for (std::size_t j = 0; j < v; ++j) dot += dy[j] * yr[j];
      for (std::size_t j = 0; j < v; ++j) (*g)[r * v + j] += yr[j] * (dy[j] - dot);
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result("sum", {1}, {s}, {x}, [](const TensorImpl& out) {
    if (auto* g = input_grad(out, 0)) {
      for (auto& v : *g) v += out.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> y(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(y), {x}, [](const TensorImpl& out) {
    if (auto* g = input_grad(out, 0)) {
      for (std::size_t i = 0; i < out.grad.size(); ++i) (*g)[i] += out.grad[i];
    }
  });
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_last: no inputs");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape pl(p.shape().begin(), p.shape().end() - 1);
    if (pl != lead) {
      throw DimensionError("concat_last: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    }
    widths.push_back(last_dim(p));
    total += widths.back();
  }
  const std::size_t rows = shape_numel(lead);
  std::vector<double> y(rows * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto d = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(d.data() + r * widths[k], widths[k], y.data() + r * total + off);
    }
    off += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  return make_result("concat", std::move(shape), std::move(y), parts, [rows, total, widths](const TensorImpl& out) {
    std::size_t off2 = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (auto* g = input_grad(out, k)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < widths[k]; ++j) (*g)[r * widths[k] + j] += out.grad[r * total + off2 + j];
        }
      }
      off2 += widths[k];
    }
  });
}

Tensor slice_last(const Tensor& x, std::size_t start, std::size_t length) {
  const std::size_t n = last_dim(x);
  if (length == 0 || start + length > n) {
    throw DimensionError("slice_last: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  std::vector<double> y(rows * length);
  const auto d = x.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(d.data() + r * n + start, length, y.data() + r * length);
  Shape shape = x.shape();
  shape.back() = length;
  return make_result("slice", std::move(shape), std::move(y), {x}, [rows, n, start, length](const TensorImpl& out) {
    if (auto* g = input_grad(out, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < length; ++j) (*g)[r * n + start + j] += out.grad[r * length + j];
      }
    }
  });
}

Tensor time_slice(const Tensor& x, std::size_t t) {
  require_rank("time_slice", x, 3);
  const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
  if (t >= s) throw DimensionError("time_slice: step " + std::to_string(t) + " outside " + shape_str(x.shape()));
  std::vector<double> y(b * d);
  const auto in = x.data();
  for (std::size_t i = 0; i < b; ++i) std::copy_n(in.data() + (i * s + t) * d, d, y.data() + i * d);
  return make_result("time_slice", {b, d}, std::move(y), {x}, [b, s, d, t](const TensorImpl& out) {
    if (auto* g = input_grad(out, 0)) {
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < d; ++j) (*g)[(i * s + t) * d + j] += out.grad[i * d + j];
      }
    }
  });
}

Tensor stack_time(const std::vector<Tensor>& steps) {
  if (steps.empty()) throw DimensionError("stack_time: empty sequence");
  for (const auto& st : steps) {
    require_rank("stack_time", st, 2);
    if (st.shape() != steps[0].shape()) {
      throw DimensionError("stack_time: " + shape_str(steps[0].shape()) + " vs " + shape_str(st.shape()));
    }
  }
  const std::size_t b = steps[0].dim(0), d = steps[0].dim(1), s = steps.size();
  std::vector<double> y(b * s * d);
  for (std::size_t t = 0; t < s; ++t) {
    const auto in = steps[t].data();
    for (std::size_t i = 0; i < b; ++i) std::copy_n(in.data() + i * d, d, y.data() + (i * s + t) * d);
  }
  return make_result("stack_time", {b, s, d}, std::move(y), steps, [b, s, d](const TensorImpl& out) {
    for (std::size_t t = 0; t < s; ++t) {
      if (auto* g = input_grad(out, t)) {
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t j = 0; j < d; ++j) (*g)[i * d + j] += out.grad[(i * s + t) * d + j];
        }
      }
    }
  });
}

Tensor pick(const Tensor& x, const std::vector<int>& index) {
  require_rank("pick", x, 2);
  const std::size_t n = x.dim(0), v = x.dim(1);
  if (index.size() != n) {
    throw DimensionError("pick: " + std::to_string(index.size()) + " indices for " + shape_str(x.shape()));
  }
  std::vector<double> y(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (index[i] < 0) continue;
    if (static_cast<std::size_t>(index[i]) >= v) {
      throw DimensionError("pick: index " + std::to_string(index[i]) + " outside width " + std::to_string(v));
    }
    y[i] = x.data()[i * v + index[i]];
  }
  return make_result("pick", {n}, std::move(y), {x}, [index, v](const TensorImpl& out) {
    if (auto* g = input_grad(out, 0)) {
      for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= 0) (*g)[i * v + index[i]] += out.grad[i];
      }
    }
  });
}

ConvAxis conv_axis(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding) {
  if (stride == 0) throw DimensionError("conv2d: stride must be at least 1");
  ConvAxis a;
  if (padding == Padding::same) {
    a.out = (in + stride - 1) / stride;
    const std::size_t need = (a.out - 1) * stride + kernel;
    const std::size_t total = need > in ? need - in : 0;
    a.pad_lead = total / 2;
    if (kernel > in + total) throw DimensionError("conv2d: kernel larger than padded input");
  } else {
    if (kernel > in) {
      throw DimensionError("conv2d: kernel extent " + std::to_string(kernel) + " larger than input extent " +
                           std::to_string(in));
    }
    a.out = (in - kernel) / stride + 1;
    a.pad_lead = 0;
  }
  return a;
}

namespace {

struct ConvGeom {
  std::size_t b, h, w, c, k, kh, kw, sh, sw, oh, ow, ph, pw;
  std::size_t patch() const { return kh * kw * c; }
  std::size_t rows() const { return b * oh * ow; }
};

void im2col(const ConvGeom& g, const double* x, double* cols) {
  const std::size_t p = g.patch();
  for (std::size_t bi = 0; bi < g.b; ++bi) {
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        double* row = cols + ((bi * g.oh + oy) * g.ow + ox) * p;
        for (std::size_t i = 0; i < g.kh; ++i) {
          const long iy = static_cast<long>(oy * g.sh + i) - static_cast<long>(g.ph);
          for (std::size_t j = 0; j < g.kw; ++j) {
            const long ix = static_cast<long>(ox * g.sw + j) - static_cast<long>(g.pw);
            double* dst = row + (i * g.kw + j) * g.c;
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.h) || ix >= static_cast<long>(g.w)) {
              std::fill_n(dst, g.c, 0.0);
            } else {
              std::copy_n(x + ((bi * g.h + iy) * g.w + ix) * g.c, g.c, dst);
            }
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeom& g, const double* cols, double* dx) {
  const std::size_t p = g.patch();
  for (std::size_t bi = 0; bi < g.b; ++bi) {
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        const double* row = cols + ((bi * g.oh + oy) * g.ow + ox) * p;
        for (std::size_t i = 0; i < g.kh; ++i) {
          const long iy = static_cast<long>(oy * g.sh + i) - static_cast<long>(g.ph);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t j = 0; j < g.kw; ++j) {
            const long ix = static_cast<long>(ox * g.sw + j) - static_cast<long>(g.pw);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            const double* src = row + (i * g.kw + j) * g.c;
            double* dst = dx + ((bi * g.h + iy) * g.w + ix) * g.c;
            for (std::size_t c = 0; c < g.c; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& filters, const Tensor& bias, const Conv2dOptions& opt) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", filters, 4);
  ConvGeom g{};
  g.b = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.c = x.dim(3);
  g.k = filters.dim(0);
  g.kh = filters.dim(1);
  g.kw = filters.dim(2);
  if (filters.dim(3) != g.c) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " vs filters " + shape_str(filters.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.k)) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(g.k) + " filters");
  }
  g.sh = opt.stride_h;
  g.sw = opt.stride_w;
  const auto ay = conv_axis(g.h, g.kh, g.sh, opt.padding);
  const auto ax = conv_axis(g.w, g.kw, g.sw, opt.padding);
  g.oh = ay.out;
  g.ow = ax.out;
  g.ph = ay.pad_lead;
  g.pw = ax.pad_lead;

  const std::size_t p = g.patch(), rows = g.rows();
  std::vector<double> cols(rows * p);
  im2col(g, x.data().data(), cols.data());
  std::vector<double> y(rows * g.k);
  MapM ym(y.data(), rows, g.k);
  ym.noalias() = MapC(cols.data(), rows, p) * MapC(filters.data().data(), g.k, p).transpose();
  std::vector<Tensor> inputs{x, filters};
  if (bias.defined()) {
    ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), g.k);
    inputs.push_back(bias);
  }
  const bool has_bias = bias.defined();
  return make_result("conv2d", {g.b, g.oh, g.ow, g.k}, std::move(y), std::move(inputs),
                     [g, has_bias](const TensorImpl& out) {
                       const std::size_t p2 = g.patch(), rows2 = g.rows();
                       MapC dy(out.grad.data(), rows2, g.k);
                       auto* gx = input_grad(out, 0);
                       auto* gf = input_grad(out, 1);
                       if (gf) {
                         // Patches are rebuilt rather than kept alive across the pass.
                         std::vector<double> cols2(rows2 * p2);
                         im2col(g, input_data(out, 0).data(), cols2.data());
                         MapM(gf->data(), g.k, p2).noalias() += dy.transpose() * MapC(cols2.data(), rows2, p2);
                       }
                       if (gx) {
                         std::vector<double> dcols(rows2 * p2);
                         MapM(dcols.data(), rows2, p2).noalias() = dy * MapC(input_data(out, 1).data(), g.k, p2);
                         col2im_add(g, dcols.data(), gx->data());
                       }
                       if (has_bias) {
                         if (auto* gb = input_grad(out, 2)) {
                           Eigen::Map<Eigen::RowVectorXd>(gb->data(), g.k) += dy.colwise().sum();
                         }
                       }
                     });
}

namespace {

std::vector<bool> resolve_rows(std::size_t rows, const std::vector<bool>* valid_rows) {
  if (!valid_rows) return std::vector<bool>(rows, true);
  if (valid_rows->size() != rows) {
    throw DimensionError("batch_norm: row mask has " + std::to_string(valid_rows->size()) + " entries for " +
                         std::to_string(rows) + " rows");
  }
  return *valid_rows;
}

}  // namespace

Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                        ChannelMoments* moments, const std::vector<bool>* valid_rows) {
  const std::size_t c = last_dim(x);
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("batch_norm: input " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()) +
                         " and beta " + shape_str(beta.shape()));
  }
  const std::size_t rows = x.numel() / c;
  std::vector<bool> valid = resolve_rows(rows, valid_rows);
  const auto n = static_cast<std::size_t>(std::count(valid.begin(), valid.end(), true));
  if (n < 2) throw DimensionError("batch_norm: train mode needs at least 2 values per feature, got " + std::to_string(n));
  const auto in = x.data();
  std::vector<double> mu(c, 0.0), var(c, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!valid[r]) continue;
    for (std::size_t j = 0; j < c; ++j) mu[j] += in[r * c + j];
  }
  for (auto& m : mu) m /= static_cast<double>(n);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!valid[r]) continue;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = in[r * c + j] - mu[j];
      var[j] += d * d;
    }
  }
  for (auto& v : var) v /= static_cast<double>(n);
  std::vector<double> inv(c);
  for (std::size_t j = 0; j < c; ++j) inv[j] = 1.0 / std::sqrt(var[j] + eps);
  std::vector<double> xhat(in.size(), 0.0), y(in.size(), 0.0);
  const auto gd = gamma.data();
  const auto bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (!valid[r]) continue;
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t i = r * c + j;
      xhat[i] = (in[i] - mu[j]) * inv[j];
      y[i] = gd[j] * xhat[i] + bd[j];
    }
  }
  if (moments) {
    moments->mean = mu;
    moments->var = var;
    moments->count = n;
  }
  return make_result(
      "batch_norm", x.shape(), std::move(y), {x, gamma, beta},
      [rows, n, c, valid = std::move(valid), xhat = std::move(xhat), inv = std::move(inv)](const TensorImpl& out) {
        const auto& gam = input_data(out, 1);
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          if (!valid[r]) continue;
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t i = r * c + j;
            sum_dy[j] += out.grad[i];
            sum_dy_xhat[j] += out.grad[i] * xhat[i];
          }
        }
        if (auto* g = input_grad(out, 0)) {
          const double nn = static_cast<double>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            if (!valid[r]) continue;
            for (std::size_t j = 0; j < c; ++j) {
              const std::size_t i = r * c + j;
              (*g)[i] += gam[j] * inv[j] / nn * (nn * out.grad[i] - sum_dy[j] - xhat[i] * sum_dy_xhat[j]);
            }
          }
        }
        if (auto* g = input_grad(out, 1)) {
          for (std::size_t j = 0; j < c; ++j) (*g)[j] += sum_dy_xhat[j];
        }
        if (auto* g = input_grad(out, 2)) {
          for (std::size_t j = 0; j < c; ++j) (*g)[j] += sum_dy[j];
        }
      });
}

Tensor batch_norm_infer(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::span<const double> mean,
                        std::span<const double> var, double eps, const std::vector<bool>* valid_rows) {
  const std::size_t c = last_dim(x);
  if (gamma.numel() != c || beta.numel() != c || mean.size() != c || var.size() != c) {
    throw DimensionError("batch_norm: input " + shape_str(x.shape()) + " with " + std::to_string(gamma.numel()) +
                         " channels of parameters");
  }
  const std::size_t rows = x.numel() / c;
  std::vector<bool> valid = resolve_rows(rows, valid_rows);
  std::vector<double> inv(c);
  for (std::size_t j = 0; j < c; ++j) inv[j] = 1.0 / std::sqrt(var[j] + eps);
  const auto in = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  std::vector<double> xhat(in.size(), 0.0), y(in.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!valid[r]) continue;
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t i = r * c + j;
      xhat[i] = (in[i] - mean[j]) * inv[j];
      y[i] = gd[j] * xhat[i] + bd[j];
    }
  }
  return make_result("batch_norm_infer", x.shape(), std::move(y), {x, gamma, beta},
                     [rows, c, valid = std::move(valid), xhat = std::move(xhat), inv = std::move(inv)](
                         const TensorImpl& out) {
                       const auto& gam = input_data(out, 1);
                       auto* gx = input_grad(out, 0);
                       auto* gg = input_grad(out, 1);
                       auto* gb = input_grad(out, 2);
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (!valid[r]) continue;
                         for (std::size_t j = 0; j < c; ++j) {
                           const std::size_t i = r * c + j;
                           if (gx) (*gx)[i] += out.grad[i] * gam[j] * inv[j];
                           if (gg) (*gg)[j] += out.grad[i] * xhat[i];
                           if (gb) (*gb)[j] += out.grad[i];
                         }
                       }
                     });
}

}  // namespace convattn::ops
