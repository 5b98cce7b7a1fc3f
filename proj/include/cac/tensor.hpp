#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every tensor is two dimensional (rows x cols); feature maps are
// stored as (H*W) x C with the spatial extent carried alongside.

#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace cac {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Eigen's vectorized kernels peel differently depending on pointer
// alignment, so storage is over-aligned to keep results reproducible.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
struct Node {
  int rows = 0;
  int cols = 0;
  Buffer<T> value;
  Buffer<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;

  T* grad_data() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(int rows, int cols, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->rows = rows;
    n->cols = cols;
    n->value.assign(static_cast<size_t>(rows) * cols, T(0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(int rows, int cols, const std::vector<T>& values, bool requires_grad = false) {
    return from_buffer(rows, cols, Buffer<T>(values.begin(), values.end()), requires_grad);
  }

  static Tensor from_buffer(int rows, int cols, Buffer<T> values, bool requires_grad = false) {
    if (values.size() != static_cast<size_t>(rows) * cols)
      throw std::invalid_argument("tensor data size does not match shape");
    auto n = std::make_shared<Node<T>>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  int rows() const { return node_->rows; }
  int cols() const { return node_->cols; }
  size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  std::span<T> grad() { return std::span<T>(node_->grad_data(), node_->value.size()); }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  T& operator()(int r, int c) { return node_->value[static_cast<size_t>(r) * node_->cols + c]; }
  T operator()(int r, int c) const { return node_->value[static_cast<size_t>(r) * node_->cols + c]; }
  T item() const {
    assert(size() == 1);
    return node_->value[0];
  }

  MatMap<T> map() { return MatMap<T>(node_->value.data(), node_->rows, node_->cols); }
  ConstMatMap<T> map() const { return ConstMatMap<T>(node_->value.data(), node_->rows, node_->cols); }

  // Detached copy of the values.
  Tensor detach() const { return Tensor::from_buffer(rows(), cols(), node_->value); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

  // Reverse pass seeded with d(self)/d(self) = 1. Requires a scalar.
  void backward() {
    if (size() != 1) throw std::logic_error("backward() requires a scalar tensor");
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->grad_data()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward) (*it)->backward();
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
bool any_requires(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Creates an output node; parents are attached only when gradients flow.
template <class T>
std::shared_ptr<Node<T>> make_output(int rows, int cols, std::initializer_list<const Tensor<T>*> inputs) {
  auto n = std::make_shared<Node<T>>();
  n->rows = rows;
  n->cols = cols;
  n->value.assign(static_cast<size_t>(rows) * cols, T(0));
  n->requires_grad = any_requires<T>(inputs);
  if (n->requires_grad)
    for (auto* t : inputs) n->parents.push_back(t->shared());
  return n;
}

template <class T>
MatMap<T> grad_map(Node<T>* n) {
  return MatMap<T>(n->grad_data(), n->rows, n->cols);
}

inline void check_same_shape(int r1, int c1, int r2, int c2, const char* op) {
  if (r1 != r2 || c1 != c2)
    throw ConfigError(std::string(op) + ": shape mismatch " + std::to_string(r1) + "x" + std::to_string(c1) +
                      " vs " + std::to_string(r2) + "x" + std::to_string(c2));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) detail::check_same_shape(a.cols(), 0, b.rows(), 0, "matmul");
  auto out = detail::make_output<T>(a.rows(), b.cols(), {&a, &b});
  MatMap<T>(out->value.data(), out->rows, out->cols).noalias() = a.map() * b.map();
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, a, b]() {
      auto g = ConstMatMap<T>(o->grad.data(), o->rows, o->cols);
      if (a.requires_grad()) detail::grad_map(a.node()).noalias() += g * b.map().transpose();
      if (b.requires_grad()) detail::grad_map(b.node()).noalias() += a.map().transpose() * g;
    };
  }
  return Tensor<T>(out);
}

// a * b^T
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols()) detail::check_same_shape(a.cols(), 0, b.cols(), 0, "matmul_nt");
  auto out = detail::make_output<T>(a.rows(), b.rows(), {&a, &b});
  MatMap<T>(out->value.data(), out->rows, out->cols).noalias() = a.map() * b.map().transpose();
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, a, b]() {
      auto g = ConstMatMap<T>(o->grad.data(), o->rows, o->cols);
      if (a.requires_grad()) detail::grad_map(a.node()).noalias() += g * b.map();
      if (b.requires_grad()) detail::grad_map(b.node()).noalias() += g.transpose() * a.map();
    };
  }
  return Tensor<T>(out);
}

// x * w + b, with w of shape in x out and b a 1 x out row.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.cols() != w.rows()) detail::check_same_shape(x.cols(), 0, w.rows(), 0, "linear");
  auto out = detail::make_output<T>(x.rows(), w.cols(), {&x, &w, &b});
  auto y = MatMap<T>(out->value.data(), out->rows, out->cols);
  y.noalias() = x.map() * w.map();
  y.rowwise() += b.map().row(0);
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, x, w, b]() {
      auto g = ConstMatMap<T>(o->grad.data(), o->rows, o->cols);
      if (x.requires_grad()) detail::grad_map(x.node()).noalias() += g * w.map().transpose();
      if (w.requires_grad()) detail::grad_map(w.node()).noalias() += x.map().transpose() * g;
      if (b.requires_grad()) detail::grad_map(b.node()).row(0) += g.colwise().sum();
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), "add");
  auto out = detail::make_output<T>(a.rows(), a.cols(), {&a, &b});
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.data()[i] + b.data()[i];
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, a, b]() {
      for (const Tensor<T>* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        T* g = t->node()->grad_data();
        for (size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i];
      }
    };
  }
  return Tensor<T>(out);
}

// Adds a 1 x cols row to every row of a.
template <class T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row) {
  detail::check_same_shape(1, a.cols(), row.rows(), row.cols(), "add_row");
  auto out = detail::make_output<T>(a.rows(), a.cols(), {&a, &row});
  MatMap<T>(out->value.data(), out->rows, out->cols) = a.map().rowwise() + row.map().row(0);
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, a, row]() {
      auto g = ConstMatMap<T>(o->grad.data(), o->rows, o->cols);
      if (a.requires_grad()) detail::grad_map(a.node()) += g;
      if (row.requires_grad()) detail::grad_map(row.node()).row(0) += g.colwise().sum();
    };
  }
  return Tensor<T>(out);
}

// Multiplies every row of a elementwise by a 1 x cols row.
template <class T>
Tensor<T> mul_row(const Tensor<T>& a, const Tensor<T>& row) {
  detail::check_same_shape(1, a.cols(), row.rows(), row.cols(), "mul_row");
  auto out = detail::make_output<T>(a.rows(), a.cols(), {&a, &row});
  MatMap<T>(out->value.data(), out->rows, out->cols) = a.map().array().rowwise() * row.map().row(0).array();
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, a, row]() {
      auto g = ConstMatMap<T>(o->grad.data(), o->rows, o->cols);
      if (a.requires_grad())
        detail::grad_map(a.node()).array() += g.array().rowwise() * row.map().row(0).array();
      if (row.requires_grad())
        detail::grad_map(row.node()).row(0) += (g.array() * a.map().array()).matrix().colwise().sum();
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  auto out = detail::make_output<T>(a.rows(), a.cols(), {&a});
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.data()[i] * factor;
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, a, factor]() {
      T* g = a.node()->grad_data();
      for (size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i] * factor;
    };
  }
  return Tensor<T>(out);
}

namespace detail {
// Pointwise op y = f(x) whose derivative is expressed through (x, y).
template <class T, class F, class D>
Tensor<T> pointwise(const Tensor<T>& a, F f, D dfdx) {
  auto out = make_output<T>(a.rows(), a.cols(), {&a});
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = f(a.data()[i]);
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, a, dfdx]() {
      T* g = a.node()->grad_data();
      auto x = a.data();
      for (size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i] * dfdx(x[i], o->value[i]);
    };
  }
  return Tensor<T>(out);
}
}  // namespace detail

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::pointwise(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::pointwise(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& a) {
  return detail::pointwise(
      a, [](T x) { return x > T(20) ? x : std::log1p(std::exp(x)); },
      [](T x, T) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      });
}

// Inverted dropout; identity when not training or p == 0.
template <class T, class Rng>
Tensor<T> dropout(const Tensor<T>& a, T p, bool training, Rng& rng) {
  if (!training || p <= T(0)) return a;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  std::vector<T> mask(a.size());
  const T inv = T(1) / (T(1) - p);
  for (auto& m : mask) m = keep(rng) ? inv : T(0);
  auto out = detail::make_output<T>(a.rows(), a.cols(), {&a});
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.data()[i] * mask[i];
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, a, mask = std::move(mask)]() {
      T* g = a.node()->grad_data();
      for (size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i] * mask[i];
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

// Numerically stabilized softmax over each row.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  auto out = detail::make_output<T>(a.rows(), a.cols(), {&a});
  const int n = a.rows(), m = a.cols();
  for (int r = 0; r < n; ++r) {
    const T* x = a.data().data() + static_cast<size_t>(r) * m;
    T* y = out->value.data() + static_cast<size_t>(r) * m;
    T mx = x[0];
    for (int c = 1; c < m; ++c) mx = std::max(mx, x[c]);
    T sum = 0;
    for (int c = 0; c < m; ++c) sum += (y[c] = std::exp(x[c] - mx));
    for (int c = 0; c < m; ++c) y[c] /= sum;
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, a, n, m]() {
      T* g = a.node()->grad_data();
      for (int r = 0; r < n; ++r) {
        const T* y = o->value.data() + static_cast<size_t>(r) * m;
        const T* gy = o->grad.data() + static_cast<size_t>(r) * m;
        T dot = 0;
        for (int c = 0; c < m; ++c) dot += gy[c] * y[c];
        T* gx = g + static_cast<size_t>(r) * m;
        for (int c = 0; c < m; ++c) gx[c] += y[c] * (gy[c] - dot);
      }
    };
  }
  return Tensor<T>(out);
}

// Layer normalization over each row with learned gain and shift (1 x cols).
template <class T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& shift, T eps = T(1e-5)) {
  detail::check_same_shape(1, a.cols(), gain.rows(), gain.cols(), "layer_norm");
  const int n = a.rows(), m = a.cols();
  auto out = detail::make_output<T>(n, m, {&a, &gain, &shift});
  std::vector<T> xhat(a.size()), inv_std(n);
  for (int r = 0; r < n; ++r) {
    const T* x = a.data().data() + static_cast<size_t>(r) * m;
    T mean = 0;
    for (int c = 0; c < m; ++c) mean += x[c];
    mean /= m;
    T var = 0;
    for (int c = 0; c < m; ++c) var += (x[c] - mean) * (x[c] - mean);
    var /= m;
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (int c = 0; c < m; ++c) {
      const size_t i = static_cast<size_t>(r) * m + c;
      xhat[i] = (x[c] - mean) * inv_std[r];
      out->value[i] = xhat[i] * gain.data()[c] + shift.data()[c];
    }
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, a, gain, shift, n, m, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
      T* gg = gain.requires_grad() ? gain.node()->grad_data() : nullptr;
      T* gs = shift.requires_grad() ? shift.node()->grad_data() : nullptr;
      T* gx = a.requires_grad() ? a.node()->grad_data() : nullptr;
      std::vector<T> dxhat(m);
      for (int r = 0; r < n; ++r) {
        const size_t base = static_cast<size_t>(r) * m;
        T sum_d = 0, sum_dx = 0;
        for (int c = 0; c < m; ++c) {
          const T gy = o->grad[base + c];
          if (gg) gg[c] += gy * xhat[base + c];
          if (gs) gs[c] += gy;
          dxhat[c] = gy * gain.data()[c];
          sum_d += dxhat[c];
          sum_dx += dxhat[c] * xhat[base + c];
        }
        if (!gx) continue;
        for (int c = 0; c < m; ++c)
          gx[base + c] += inv_std[r] / m * (m * dxhat[c] - sum_d - xhat[base + c] * sum_dx);
      }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Structural

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, int begin, int end) {
  if (begin < 0 || end > a.cols() || begin >= end) throw ConfigError("slice_cols: bad range");
  const int w = end - begin;
  auto out = detail::make_output<T>(a.rows(), w, {&a});
  MatMap<T>(out->value.data(), out->rows, w) = a.map().middleCols(begin, w);
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, a, begin, w]() {
      detail::grad_map(a.node()).middleCols(begin, w) += ConstMatMap<T>(o->grad.data(), o->rows, w);
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ConfigError("concat_cols: no inputs");
  const int n = parts[0].rows();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rows() != n) throw ConfigError("concat_cols: row mismatch");
    total += p.cols();
  }
  auto out = std::make_shared<Node<T>>();
  out->rows = n;
  out->cols = total;
  out->value.assign(static_cast<size_t>(n) * total, T(0));
  out->requires_grad = false;
  if (grad_enabled())
    for (const auto& p : parts) out->requires_grad = out->requires_grad || p.requires_grad();
  auto y = MatMap<T>(out->value.data(), n, total);
  int offset = 0;
  for (const auto& p : parts) {
    y.middleCols(offset, p.cols()) = p.map();
    offset += p.cols();
  }
  if (out->requires_grad) {
    for (const auto& p : parts) out->parents.push_back(p.shared());
    Node<T>* o = out.get();
    out->backward = [o, parts]() {
      auto g = ConstMatMap<T>(o->grad.data(), o->rows, o->cols);
      int off = 0;
      for (const auto& p : parts) {
        if (p.requires_grad()) detail::grad_map(p.node()) += g.middleCols(off, p.cols());
        off += p.cols();
      }
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ConfigError("concat_rows: no inputs");
  const int m = parts[0].cols();
  int total = 0;
  for (const auto& p : parts) {
    if (p.cols() != m) throw ConfigError("concat_rows: column mismatch");
    total += p.rows();
  }
  auto out = std::make_shared<Node<T>>();
  out->rows = total;
  out->cols = m;
  out->value.reserve(static_cast<size_t>(total) * m);
  out->requires_grad = false;
  for (const auto& p : parts) {
    out->value.insert(out->value.end(), p.data().begin(), p.data().end());
    if (grad_enabled()) out->requires_grad = out->requires_grad || p.requires_grad();
  }
  if (out->requires_grad) {
    for (const auto& p : parts) out->parents.push_back(p.shared());
    Node<T>* o = out.get();
    out->backward = [o, parts]() {
      size_t off = 0;
      for (const auto& p : parts) {
        if (p.requires_grad()) {
          T* g = p.node()->grad_data();
          for (size_t i = 0; i < p.size(); ++i) g[i] += o->grad[off + i];
        }
        off += p.size();
      }
    };
  }
  return Tensor<T>(out);
}

// Selects rows of a table; gradients scatter back only into selected rows.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, std::vector<int> indices) {
  const int m = table.cols();
  auto out = detail::make_output<T>(static_cast<int>(indices.size()), m, {&table});
  for (size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] < 0 || indices[r] >= table.rows()) throw ConfigError("gather_rows: index out of range");
    std::copy_n(table.data().data() + static_cast<size_t>(indices[r]) * m, m, out->value.data() + r * m);
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, table, indices = std::move(indices), m]() {
      T* g = table.node()->grad_data();
      for (size_t r = 0; r < indices.size(); ++r)
        for (int c = 0; c < m; ++c) g[static_cast<size_t>(indices[r]) * m + c] += o->grad[r * m + c];
    };
  }
  return Tensor<T>(out);
}

// Column means (1 x cols).
template <class T>
Tensor<T> mean_rows(const Tensor<T>& a) {
  auto out = detail::make_output<T>(1, a.cols(), {&a});
  MatMap<T>(out->value.data(), 1, a.cols()) = a.map().colwise().mean();
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, a]() {
      auto g = ConstMatMap<T>(o->grad.data(), 1, o->cols);
      detail::grad_map(a.node()).rowwise() += g.row(0) / static_cast<T>(a.rows());
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  auto out = detail::make_output<T>(1, 1, {&a});
  T s = 0;
  for (T v : a.data()) s += v;
  out->value[0] = s;
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, a]() {
      T* g = a.node()->grad_data();
      for (size_t i = 0; i < a.size(); ++i) g[i] += o->grad[0];
    };
  }
  return Tensor<T>(out);
}

// Elementwise product with a fixed coefficient tensor (no gradient to coeffs).
template <class T>
Tensor<T> weighted_sum(const Tensor<T>& a, std::vector<T> coeffs) {
  if (coeffs.size() != a.size()) throw ConfigError("weighted_sum: size mismatch");
  auto out = detail::make_output<T>(1, 1, {&a});
  T s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += a.data()[i] * coeffs[i];
  out->value[0] = s;
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, a, coeffs = std::move(coeffs)]() {
      T* g = a.node()->grad_data();
      for (size_t i = 0; i < coeffs.size(); ++i) g[i] += o->grad[0] * coeffs[i];
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Spatial

struct ConvGeometry {
  int in_height = 0;
  int in_width = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  int out_height() const { return (in_height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (in_width + 2 * pad - kernel) / stride + 1; }
};

// 2-D convolution of an (H*W) x C map with weights (k*k*C) x O laid out as
// [ky][kx][c] along the rows; bias is 1 x O.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const ConvGeometry& geo) {
  const int channels = x.cols();
  const int k = geo.kernel;
  if (x.rows() != geo.in_height * geo.in_width) throw ConfigError("conv2d: input rows do not match geometry");
  if (w.rows() != k * k * channels) throw ConfigError("conv2d: weight rows do not match kernel*kernel*channels");
  const int ho = geo.out_height(), wo = geo.out_width();
  if (ho <= 0 || wo <= 0) throw ConfigError("conv2d: empty output");
  const int patch = k * k * channels;
  RowMatrix<T> cols = RowMatrix<T>::Zero(static_cast<Eigen::Index>(ho) * wo, patch);
  const T* src = x.data().data();
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      T* dst = cols.data() + (static_cast<size_t>(oy) * wo + ox) * patch;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * geo.stride - geo.pad + ky;
        if (iy < 0 || iy >= geo.in_height) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * geo.stride - geo.pad + kx;
          if (ix < 0 || ix >= geo.in_width) continue;
          std::copy_n(src + (static_cast<size_t>(iy) * geo.in_width + ix) * channels, channels,
                      dst + (ky * k + kx) * channels);
        }
      }
    }
  auto out = detail::make_output<T>(ho * wo, w.cols(), {&x, &w, &b});
  auto y = MatMap<T>(out->value.data(), out->rows, out->cols);
  y.noalias() = cols * w.map();
  y.rowwise() += b.map().row(0);
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, x, w, b, geo, cols = std::move(cols), ho, wo, patch, channels, k]() {
      auto g = ConstMatMap<T>(o->grad.data(), o->rows, o->cols);
      if (w.requires_grad()) detail::grad_map(w.node()).noalias() += cols.transpose() * g;
      if (b.requires_grad()) detail::grad_map(b.node()).row(0) += g.colwise().sum();
      if (!x.requires_grad()) return;
      RowMatrix<T> dcols = g * w.map().transpose();
      T* gx = x.node()->grad_data();
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const T* d = dcols.data() + (static_cast<size_t>(oy) * wo + ox) * patch;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * geo.stride - geo.pad + ky;
            if (iy < 0 || iy >= geo.in_height) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * geo.stride - geo.pad + kx;
              if (ix < 0 || ix >= geo.in_width) continue;
              T* dst = gx + (static_cast<size_t>(iy) * geo.in_width + ix) * channels;
              const T* s = d + (ky * k + kx) * channels;
              for (int c = 0; c < channels; ++c) dst[c] += s[c];
            }
          }
        }
    };
  }
  return Tensor<T>(out);
}

// Mean over the rectangular cell window [y0, y1) x [x0, x1) of an (H*W) x C
// map; returns 1 x C.
template <class T>
Tensor<T> region_mean(const Tensor<T>& map, int width, int y0, int y1, int x0, int x1) {
  const int c = map.cols();
  if (y1 <= y0 || x1 <= x0) throw ConfigError("region_mean: empty window");
  auto out = detail::make_output<T>(1, c, {&map});
  const T inv = T(1) / static_cast<T>((y1 - y0) * (x1 - x0));
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      const T* src = map.data().data() + (static_cast<size_t>(y) * width + x) * c;
      for (int ch = 0; ch < c; ++ch) out->value[ch] += src[ch];
    }
  for (auto& v : out->value) v *= inv;
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, map, width, y0, y1, x0, x1, c, inv]() {
      T* g = map.node()->grad_data();
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          T* dst = g + (static_cast<size_t>(y) * width + x) * c;
          for (int ch = 0; ch < c; ++ch) dst[ch] += o->grad[ch] * inv;
        }
    };
  }
  return Tensor<T>(out);
}

}  // namespace cac
