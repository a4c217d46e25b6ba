#pragma once

// Dense row-major tensors of doubles plus a small reverse-mode autodiff
// graph covering the operations used by the transformer backbone and the
// prefix generator.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dapa/error.hpp"

namespace dapa {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_product(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (shape_product(shape_) != data_.size()) {
      throw DimensionError("tensor shape " + shape_string(shape_) + " does not match " +
                           std::to_string(data_.size()) + " values");
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> values;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      values.insert(values.end(), r.begin(), r.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Matrix view: rank-1 tensors are one row, scalars are 1x1.
  std::size_t rows() const noexcept {
    return shape_.size() >= 2 ? shape_product(Shape(shape_.begin(), shape_.end() - 1)) : 1;
  }
  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }
  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols(), cols()}; }

  double item() const {
    if (data_.size() != 1) throw UsageError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  std::string shape_str() const { return shape_string(shape_); }

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Exact bit-pattern equality of shape and contents.
inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         (a.size() == 0 || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("max_abs_diff: " + a.shape_str() + " vs " + b.shape_str());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Raw kernels shared by the autodiff ops and the graph-free inference path.
// Reductions run sequentially in row-major order so results are bitwise
// reproducible.
namespace kernels {

/// out[m x n] (+)= a[m x k] * b[k x n]
inline void matmul(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n,
                   bool accumulate = false) {
  if (!accumulate) std::fill(out, out + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

/// out[m x n] (+)= a[m x k] * b[n x k]^T
inline void matmul_nt(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n,
                      bool accumulate = false) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      if (accumulate) {
        out[i * n + j] += s;
      } else {
        out[i * n + j] = s;
      }
    }
  }
}

/// out[k x n] += a[m x k]^T * b[m x n]
inline void matmul_tn_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                          std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

inline void softmax_row(double* row, std::size_t n) {
  if (n == 0) return;
  double mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

/// Row-wise layer norm; optionally stores normalized values and 1/std.
inline void layer_norm(const double* x, const double* gain, const double* bias, double eps, double* out,
                       std::size_t rows, std::size_t d, double* xhat = nullptr, double* rstd = nullptr) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    if (rstd) rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * rs;
      if (xhat) xhat[r * d + j] = h;
      out[r * d + j] = h * gain[j] + bias[j];
    }
  }
}

struct AttentionShape {
  std::size_t queries = 0;
  std::size_t keys = 0;  // includes prefix rows
  std::size_t width = 0;
  std::size_t heads = 1;
  std::size_t prefix = 0;       // leading key rows that are always visible
  bool causal = false;
  std::size_t query_offset = 0;  // absolute position of the first query row
};

inline bool key_visible(const AttentionShape& s, std::size_t query, std::size_t key) {
  if (!s.causal || key < s.prefix) return true;
  return key - s.prefix <= query + s.query_offset;
}

/// Multi-head scaled dot-product attention. `probs`, when given, receives
/// heads x queries x keys attention weights.
inline void attention(const AttentionShape& s, const double* q, const double* k, const double* v, double* out,
                      double* probs = nullptr) {
  const std::size_t dh = s.width / s.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> row(s.keys);
  std::fill(out, out + s.queries * s.width, 0.0);
  for (std::size_t h = 0; h < s.heads; ++h) {
    const std::size_t c0 = h * dh;
    for (std::size_t i = 0; i < s.queries; ++i) {
      const double* qi = q + i * s.width + c0;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.keys; ++j) {
        if (!key_visible(s, i, j)) continue;
        const double* kj = k + j * s.width + c0;
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
        row[j] = dot * scale;
        mx = std::max(mx, row[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < s.keys; ++j) {
        if (!key_visible(s, i, j)) {
          row[j] = 0.0;
          continue;
        }
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      const double inv = 1.0 / sum;
      double* oi = out + i * s.width + c0;
      for (std::size_t j = 0; j < s.keys; ++j) {
        const double p = row[j] * inv;
        if (probs) probs[(h * s.queries + i) * s.keys + j] = p;
        if (p == 0.0) continue;
        const double* vj = v + j * s.width + c0;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
      }
    }
  }
}

inline double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  constexpr double k = 0.7978845608028654;
  const double u = k * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x);
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Autodiff graph

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool leaf = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor(value.shape());
    return grad;
  }
};

}  // namespace detail

/// Handle to a value in the computation graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool valid() const { return static_cast<bool>(node_); }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

inline Var constant(Tensor value) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

/// A leaf tensor with an accumulated gradient. Copying a Parameter copies
/// its value and gradient; graph handles taken from the original keep
/// pointing at the original.
class Parameter {
 public:
  Parameter() : Parameter(Tensor{}) {}

  explicit Parameter(Tensor value, bool trainable = true) : node_(std::make_shared<detail::Node>()) {
    node_->grad = Tensor(value.shape());
    node_->value = std::move(value);
    node_->leaf = true;
    node_->requires_grad = trainable;
  }

  Parameter(const Parameter& other) : node_(std::make_shared<detail::Node>(clone_leaf(*other.node_))) {}
  Parameter& operator=(const Parameter& other) {
    if (this != &other) node_ = std::make_shared<detail::Node>(clone_leaf(*other.node_));
    return *this;
  }
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad() { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }

  bool trainable() const { return node_->requires_grad; }
  void set_trainable(bool on) { node_->requires_grad = on; }

  void zero_grad() {
    if (node_->grad.shape() != node_->value.shape()) node_->grad = Tensor(node_->value.shape());
    node_->grad.fill(0.0);
  }

  Var var() const { return Var(node_); }

 private:
  static detail::Node clone_leaf(const detail::Node& n) {
    detail::Node c;
    c.value = n.value;
    c.grad = n.grad;
    c.leaf = true;
    c.requires_grad = n.requires_grad;
    return c;
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Var make_result(Tensor value, std::vector<std::shared_ptr<Node>> parents, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = std::any_of(parents.begin(), parents.end(), [](const auto& p) { return p->requires_grad; });
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward = std::move(bw);
  }
  return Var(std::move(n));
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + t.shape_str());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_matrix(av, "matmul");
  detail::require_matrix(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner extents differ for " + av.shape_str() + " x " + bv.shape_str());
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out(Shape{m, n});
  kernels::matmul(av.data(), bv.data(), out.data(), m, k, n);
  auto pa = a.node(), pb = b.node();
  return detail::make_result(std::move(out), {pa, pb}, [pa, pb, m, k, n](detail::Node& self) {
    if (pa->requires_grad) {
      kernels::matmul_nt(self.grad.data(), pb->value.data(), pa->grad_buffer().data(), m, n, k, true);
    }
    if (pb->requires_grad) {
      kernels::matmul_tn_acc(pa->value.data(), self.grad.data(), pb->grad_buffer().data(), m, k, n);
    }
  });
}

/// a[m x k] * b[n x k]^T
inline Var matmul_nt(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_matrix(av, "matmul_nt");
  detail::require_matrix(bv, "matmul_nt");
  if (av.cols() != bv.cols()) {
    throw DimensionError("matmul_nt: inner extents differ for " + av.shape_str() + " x " + bv.shape_str() + "^T");
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  Tensor out(Shape{m, n});
  kernels::matmul_nt(av.data(), bv.data(), out.data(), m, k, n);
  auto pa = a.node(), pb = b.node();
  return detail::make_result(std::move(out), {pa, pb}, [pa, pb, m, k, n](detail::Node& self) {
    if (pa->requires_grad) kernels::matmul(self.grad.data(), pb->value.data(), pa->grad_buffer().data(), m, n, k, true);
    if (pb->requires_grad) kernels::matmul_tn_acc(self.grad.data(), pa->value.data(), pb->grad_buffer().data(), m, n, k);
  });
}

/// x[m x k] * w[k x n] + bias[n]
inline Var linear(const Var& x, const Var& w, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  detail::require_matrix(xv, "linear");
  detail::require_matrix(wv, "linear");
  if (xv.cols() != wv.rows() || bias.value().size() != wv.cols()) {
    throw DimensionError("linear: " + xv.shape_str() + " x " + wv.shape_str() + " + " + bias.value().shape_str());
  }
  const std::size_t m = xv.rows(), k = xv.cols(), n = wv.cols();
  Tensor out(Shape{m, n});
  const double* bp = bias.value().data();
  for (std::size_t i = 0; i < m; ++i) std::copy(bp, bp + n, out.data() + i * n);
  kernels::matmul(xv.data(), wv.data(), out.data(), m, k, n, true);
  auto px = x.node(), pw = w.node(), pb = bias.node();
  return detail::make_result(std::move(out), {px, pw, pb}, [px, pw, pb, m, k, n](detail::Node& self) {
    if (px->requires_grad) kernels::matmul_nt(self.grad.data(), pw->value.data(), px->grad_buffer().data(), m, n, k, true);
    if (pw->requires_grad) kernels::matmul_tn_acc(px->value.data(), self.grad.data(), pw->grad_buffer().data(), m, k, n);
    if (pb->requires_grad) {
      double* gb = pb->grad_buffer().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[i * n + j];
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) throw DimensionError("add: " + a.value().shape_str() + " vs " + b.value().shape_str());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_result(std::move(out), {pa, pb}, [pa, pb](detail::Node& self) {
    for (auto* p : {pa.get(), pb.get()}) {
      if (!p->requires_grad) continue;
      Tensor& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

/// Adds a constant tensor (no gradient flows into it).
inline Var add_constant(const Var& a, const Tensor& c) {
  if (a.shape() != c.shape()) throw DimensionError("add_constant: " + a.value().shape_str() + " vs " + c.shape_str());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i];
  auto pa = a.node();
  return detail::make_result(std::move(out), {pa}, [pa](detail::Node& self) {
    Tensor& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Var mul(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) throw DimensionError("mul: " + a.value().shape_str() + " vs " + b.value().shape_str());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_result(std::move(out), {pa, pb}, [pa, pb](detail::Node& self) {
    if (pa->requires_grad) {
      Tensor& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      Tensor& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& x : out.values()) x *= s;
  auto pa = a.node();
  return detail::make_result(std::move(out), {pa}, [pa, s](detail::Node& self) {
    Tensor& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

inline Var tanh(const Var& a) {
  Tensor out = a.value();
  for (double& x : out.values()) x = std::tanh(x);
  auto pa = a.node();
  return detail::make_result(std::move(out), {pa}, [pa](detail::Node& self) {
    Tensor& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
  });
}

inline Var gelu(const Var& a) {
  Tensor out = a.value();
  for (double& x : out.values()) x = kernels::gelu(x);
  auto pa = a.node();
  return detail::make_result(std::move(out), {pa}, [pa](detail::Node& self) {
    Tensor& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * kernels::gelu_grad(pa->value[i]);
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  auto pa = a.node();
  return detail::make_result(Tensor::scalar(s), {pa}, [pa](detail::Node& self) {
    Tensor& g = pa->grad_buffer();
    const double up = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up;
  });
}

/// Sum of scalar nodes (used to accumulate per-example losses).
inline Var add_scalars(const std::vector<Var>& xs) {
  std::vector<std::shared_ptr<detail::Node>> parents;
  double s = 0.0;
  for (const Var& x : xs) {
    if (x.value().size() != 1) throw DimensionError("add_scalars: non-scalar " + x.value().shape_str());
    s += x.value()[0];
    parents.push_back(x.node());
  }
  auto ps = parents;
  return detail::make_result(Tensor::scalar(s), std::move(parents), [ps](detail::Node& self) {
    for (const auto& p : ps)
      if (p->requires_grad) p->grad_buffer()[0] += self.grad[0];
  });
}

inline Var softmax_rows(const Var& x) {
  Tensor out = x.value();
  const std::size_t m = out.rows(), n = out.cols();
  for (std::size_t i = 0; i < m; ++i) kernels::softmax_row(out.data() + i * n, n);
  auto px = x.node();
  return detail::make_result(std::move(out), {px}, [px, m, n](detail::Node& self) {
    Tensor& g = px->grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.value.data() + i * n;
      const double* gy = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (gy[j] - dot);
    }
  });
}

inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  if (!(eps > 0.0)) throw UsageError("layer_norm: eps must be positive");
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols(), m = xv.rows();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: feature width " + std::to_string(d) + " vs gain " + gain.value().shape_str() +
                         " / bias " + bias.value().shape_str());
  }
  Tensor out(xv.shape());
  auto xhat = std::make_shared<std::vector<double>>(m * d);
  auto rstd = std::make_shared<std::vector<double>>(m);
  kernels::layer_norm(xv.data(), gain.value().data(), bias.value().data(), eps, out.data(), m, d, xhat->data(),
                      rstd->data());
  auto px = x.node(), pg = gain.node(), pb = bias.node();
  return detail::make_result(std::move(out), {px, pg, pb}, [px, pg, pb, xhat, rstd, m, d](detail::Node& self) {
    const double* gy = self.grad.data();
    const double* gv = pg->value.data();
    if (pg->requires_grad || pb->requires_grad) {
      double* gg = pg->requires_grad ? pg->grad_buffer().data() : nullptr;
      double* gb = pb->requires_grad ? pb->grad_buffer().data() : nullptr;
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < d; ++j) {
          if (gg) gg[j] += gy[r * d + j] * (*xhat)[r * d + j];
          if (gb) gb[j] += gy[r * d + j];
        }
    }
    if (px->requires_grad) {
      double* gx = px->grad_buffer().data();
      for (std::size_t r = 0; r < m; ++r) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = gy[r * d + j] * gv[j];
          mean_dh += dh;
          mean_dh_h += dh * (*xhat)[r * d + j];
        }
        mean_dh /= static_cast<double>(d);
        mean_dh_h /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = gy[r * d + j] * gv[j];
          gx[r * d + j] += (*rstd)[r] * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
        }
      }
    }
  });
}

/// Mean negative log-likelihood of `targets` over positions not equal to
/// `ignore_id`. Returns 0 when every position is ignored.
inline Var cross_entropy(const Var& logits, std::span<const int> targets, int ignore_id) {
  const Tensor& lv = logits.value();
  detail::require_matrix(lv, "cross_entropy");
  const std::size_t t_len = lv.rows(), vocab = lv.cols();
  if (targets.size() != t_len) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " + lv.shape_str());
  }
  auto probs = std::make_shared<std::vector<double>>(lv.values().begin(), lv.values().end());
  std::vector<int> tgt(targets.begin(), targets.end());
  double loss = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < t_len; ++t) {
    if (tgt[t] == ignore_id) continue;
    if (tgt[t] < 0 || static_cast<std::size_t>(tgt[t]) >= vocab) {
      throw IndexError("cross_entropy: target id " + std::to_string(tgt[t]) + " outside [0," + std::to_string(vocab) + ")");
    }
  }
  for (std::size_t t = 0; t < t_len; ++t) {
    double* row = probs->data() + t * vocab;
    kernels::softmax_row(row, vocab);
    if (tgt[t] == ignore_id) continue;
    // log-softmax computed from the logits for accuracy
    const double* lr = lv.data() + t * vocab;
    double mx = lr[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, lr[j]);
    double se = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) se += std::exp(lr[j] - mx);
    loss += -(lr[tgt[t]] - mx - std::log(se));
    ++count;
  }
  const double denom = count ? static_cast<double>(count) : 1.0;
  auto pl = logits.node();
  return detail::make_result(Tensor::scalar(loss / denom), {pl},
                             [pl, probs, tgt = std::move(tgt), ignore_id, vocab, denom](detail::Node& self) {
                               Tensor& g = pl->grad_buffer();
                               const double up = self.grad[0] / denom;
                               for (std::size_t t = 0; t < tgt.size(); ++t) {
                                 if (tgt[t] == ignore_id) continue;
                                 const double* p = probs->data() + t * vocab;
                                 double* gr = g.data() + t * vocab;
                                 for (std::size_t j = 0; j < vocab; ++j) gr[j] += up * p[j];
                                 gr[tgt[t]] -= up;
                               }
                             });
}

/// Stacks a[p x d] above b[q x d]. An empty `a` returns `b` itself.
inline Var concat_rows(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.size() == 0) return b;
  detail::require_matrix(av, "concat_rows");
  detail::require_matrix(bv, "concat_rows");
  if (av.cols() != bv.cols()) {
    throw DimensionError("concat_rows: column extents differ for " + av.shape_str() + " and " + bv.shape_str());
  }
  const std::size_t p = av.rows(), q = bv.rows(), d = av.cols();
  Tensor out(Shape{p + q, d});
  std::copy(av.values().begin(), av.values().end(), out.data());
  std::copy(bv.values().begin(), bv.values().end(), out.data() + p * d);
  auto pa = a.node(), pb = b.node();
  return detail::make_result(std::move(out), {pa, pb}, [pa, pb, p, q, d](detail::Node& self) {
    if (pa->requires_grad) {
      Tensor& g = pa->grad_buffer();
      for (std::size_t i = 0; i < p * d; ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      Tensor& g = pb->grad_buffer();
      for (std::size_t i = 0; i < q * d; ++i) g[i] += self.grad[p * d + i];
    }
  });
}

/// Rows [start, start+count) of a matrix.
inline Var slice_rows(const Var& a, std::size_t start, std::size_t count) {
  const Tensor& av = a.value();
  detail::require_matrix(av, "slice_rows");
  if (start + count > av.rows()) throw DimensionError("slice_rows: range exceeds " + av.shape_str());
  const std::size_t d = av.cols();
  Tensor out(Shape{count, d});
  std::copy(av.data() + start * d, av.data() + (start + count) * d, out.data());
  auto pa = a.node();
  return detail::make_result(std::move(out), {pa}, [pa, start, count, d](detail::Node& self) {
    Tensor& g = pa->grad_buffer();
    for (std::size_t i = 0; i < count * d; ++i) g[start * d + i] += self.grad[i];
  });
}

/// Gathers rows of `table` for `ids`, multiplied by `factor`.
inline Var embedding(const Var& table, std::span<const int> ids, double factor = 1.0) {
  const Tensor& tv = table.value();
  detail::require_matrix(tv, "embedding");
  const std::size_t d = tv.cols(), vocab = tv.rows();
  Tensor out(Shape{ids.size(), d});
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
      throw IndexError("embedding: id " + std::to_string(ids[t]) + " outside vocabulary of " + std::to_string(vocab));
    }
    const double* src = tv.data() + static_cast<std::size_t>(ids[t]) * d;
    for (std::size_t j = 0; j < d; ++j) out[t * d + j] = src[j] * factor;
  }
  auto pt = table.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return detail::make_result(std::move(out), {pt}, [pt, idv = std::move(idv), d, factor](detail::Node& self) {
    Tensor& g = pt->grad_buffer();
    for (std::size_t t = 0; t < idv.size(); ++t)
      for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(idv[t]) * d + j] += self.grad[t * d + j] * factor;
  });
}

/// Multi-head attention over keys/values whose first `prefix` rows are
/// always visible; the causal mask applies to the remaining rows only.
inline Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, std::size_t prefix, bool causal) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  detail::require_matrix(qv, "attention");
  detail::require_matrix(kv, "attention");
  detail::require_matrix(vv, "attention");
  if (kv.shape() != vv.shape() || qv.cols() != kv.cols()) {
    throw DimensionError("attention: q " + qv.shape_str() + ", k " + kv.shape_str() + ", v " + vv.shape_str());
  }
  if (heads == 0 || qv.cols() % heads != 0) throw DimensionError("attention: width not divisible by head count");
  if (prefix > kv.rows()) throw DimensionError("attention: prefix longer than key set");
  kernels::AttentionShape s{qv.rows(), kv.rows(), qv.cols(), heads, prefix, causal, 0};
  Tensor out(Shape{s.queries, s.width});
  auto probs = std::make_shared<std::vector<double>>(heads * s.queries * s.keys);
  kernels::attention(s, qv.data(), kv.data(), vv.data(), out.data(), probs->data());
  auto pq = q.node(), pk = k.node(), pv = v.node();
  return detail::make_result(std::move(out), {pq, pk, pv}, [pq, pk, pv, probs, s](detail::Node& self) {
    const std::size_t dh = s.width / s.heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    double* gq = pq->requires_grad ? pq->grad_buffer().data() : nullptr;
    double* gk = pk->requires_grad ? pk->grad_buffer().data() : nullptr;
    double* gv = pv->requires_grad ? pv->grad_buffer().data() : nullptr;
    const double* qd = pq->value.data();
    const double* kd = pk->value.data();
    const double* vd = pv->value.data();
    const double* go = self.grad.data();
    std::vector<double> dp(s.keys);
    for (std::size_t h = 0; h < s.heads; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < s.queries; ++i) {
        const double* p = probs->data() + (h * s.queries + i) * s.keys;
        const double* goi = go + i * s.width + c0;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.keys; ++j) {
          double acc = 0.0;
          const double* vj = vd + j * s.width + c0;
          for (std::size_t c = 0; c < dh; ++c) acc += goi[c] * vj[c];
          dp[j] = acc;
          dot += p[j] * acc;
          if (gv && p[j] != 0.0) {
            double* gvj = gv + j * s.width + c0;
            for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * goi[c];
          }
        }
        for (std::size_t j = 0; j < s.keys; ++j) {
          if (p[j] == 0.0) continue;
          const double ds = p[j] * (dp[j] - dot) * sc;
          if (gq) {
            const double* kj = kd + j * s.width + c0;
            double* gqi = gq + i * s.width + c0;
            for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
          }
          if (gk) {
            const double* qi = qd + i * s.width + c0;
            double* gkj = gk + j * s.width + c0;
            for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reverse pass

/// Accumulates d(loss)/d(p) into every reachable trainable Parameter.
inline void backward(const Var& loss) {
  if (!loss.valid() || loss.value().size() != 1) {
    throw UsageError("backward: root must be a scalar, got " + (loss.valid() ? loss.value().shape_str() : "null"));
  }
  if (!loss.requires_grad()) return;

  // iterative post-order DFS gives a topological order
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (detail::Node* n : order) {
    if (!n->leaf) n->grad = Tensor(n->value.shape());
  }
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) n->backward(*n);
  }
  for (detail::Node* n : order) {
    if (!n->leaf) n->grad = Tensor();
  }
}

inline void zero_grad(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

/// Compares analytic gradients against central differences and returns the
/// largest |a - n| / max(|a|, |n|, 1e-8) over all trainable elements.
inline double grad_check(const std::function<Var()>& fn, std::span<Parameter* const> params, double eps = 1e-5) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw UsageError("grad_check: eps must lie in (0, 1e-2]");
  zero_grad(params);
  backward(fn());
  double worst = 0.0;
  for (Parameter* p : params) {
    if (!p->trainable()) continue;
    Tensor analytic = p->grad();
    Tensor& value = p->value();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + eps;
      const double up = fn().value().item();
      value[i] = saved - eps;
      const double down = fn().value().item();
      value[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  zero_grad(params);
  return worst;
}

}  // namespace dapa
