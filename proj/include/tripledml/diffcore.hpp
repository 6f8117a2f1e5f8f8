#pragma once

// Minimal define-by-run reverse-mode differentiation over dense float64
// tensors. Every op records its inputs and a gradient rule on the result
// node; `backward` replays the rules of all reachable nodes in reverse
// creation order.
//
// Broadcasting is limited to scalar-tensor and row-vector-to-matrix.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tripledml/errors.hpp"

namespace tripledml {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> rule;  // adds this node's grad into inputs' grads
};

// Creation counter. Tapes never cross threads, so a per-thread counter gives
// a valid topological order for every graph.
inline std::uint64_t next_seq() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

inline std::vector<double>& grad_of(Node& n) {
  if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), 0.0);
  return n.grad;
}

}  // namespace detail

/// Handle to a node of the computation graph. Copies share storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_size(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    n->seq = detail::next_seq();
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = shape_size(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::size_t n = shape_size(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({}, {v}, requires_grad);
  }

  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    Shape s{v.size()};
    return from(std::move(s), std::move(v), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v,
                       bool requires_grad = false) {
    return from({rows, cols}, std::move(v), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

  std::span<const double> data() const { return node_->data; }
  /// Mutable view of the values. Only meaningful on leaves; results of ops
  /// already recorded their inputs by value.
  std::span<double> mutable_data() { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return detail::grad_of(*node_); }
  void zero_grad() { node_->grad.clear(); }

  double item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * node_->shape.back() + c]; }

  /// Leaf copy of the values, detached from the graph.
  Tensor detach() const { return from(shape(), node_->data, false); }
  /// Independent leaf with the same values and grad flag.
  Tensor clone() const { return from(shape(), node_->data, requires_grad()); }

  std::uint64_t sequence() const { return node_->seq; }
  const detail::NodePtr& node() const { return node_; }

  explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

 private:
  detail::NodePtr node_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> data,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> rule) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->seq = next_seq();
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const Tensor* t : inputs) n->inputs.push_back(t->node());
    n->rule = std::move(rule);
  }
  return Tensor(std::move(n));
}

inline Tensor make_result_n(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                            std::function<void(Node&)> rule) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->seq = next_seq();
  for (const Tensor& t : inputs) {
    if (t.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const Tensor& t : inputs) n->inputs.push_back(t.node());
    n->rule = std::move(rule);
  }
  return Tensor(std::move(n));
}

// How the right-hand operand of a binary op lines up with the left.
enum class Broadcast { same, rhs_scalar, lhs_scalar, rhs_row };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (b.size() == 1 && b.rank() <= 1) return Broadcast::rhs_scalar;
  if (a.size() == 1 && a.rank() <= 1) return Broadcast::lhs_scalar;
  if (a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0)) return Broadcast::rhs_row;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
}

// Generic elementwise binary op with local partials da(x, y), db(x, y).
template <typename F, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db) {
  Broadcast kind = broadcast_kind(a, b, name);
  const Shape out_shape = kind == Broadcast::lhs_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_size(out_shape);
  const std::size_t cols = kind == Broadcast::rhs_row ? b.size() : 1;
  auto ia = [kind](std::size_t i) { return kind == Broadcast::lhs_scalar ? 0 : i; };
  auto ib = [kind, cols](std::size_t i) -> std::size_t {
    switch (kind) {
      case Broadcast::rhs_scalar: return 0;
      case Broadcast::rhs_row: return i % cols;
      default: return i;
    }
  };
  std::vector<double> out(n);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(A[ia(i)], B[ib(i)]);
  return make_result(out_shape, std::move(out), {&a, &b}, [=](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto& ga = grad_of(na);
      for (std::size_t i = 0; i < n; ++i) ga[ia(i)] += g[i] * da(na.data[ia(i)], nb.data[ib(i)]);
    }
    if (nb.requires_grad) {
      auto& gb = grad_of(nb);
      for (std::size_t i = 0; i < n; ++i) gb[ib(i)] += g[i] * db(na.data[ia(i)], nb.data[ib(i)]);
    }
  });
}

template <typename F, typename D>
Tensor unary(const Tensor& x, F f, D d) {
  std::vector<double> out(x.size());
  auto X = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(X[i]);
  return make_result(x.shape(), std::move(out), {&x}, [=](Node& self) {
    Node& in = *self.inputs[0];
    auto& gi = grad_of(in);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i] * d(in.data[i], self.data[i]);
  });
}

// Rows/cols view used by row-wise reductions: the last axis is the row.
inline std::pair<std::size_t, std::size_t> rows_cols(const Tensor& x) {
  if (x.rank() == 0) return {1, 1};
  std::size_t cols = x.shape().back();
  return {cols == 0 ? 0 : x.size() / cols, cols};
}

inline Shape drop_last(const Shape& s) { return s.empty() ? Shape{} : Shape(s.begin(), s.end() - 1); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& x, double s) {
  return detail::unary(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(double s, const Tensor& a) { return add_scalar(mul_scalar(a, -1.0), s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return mul_scalar(a, -1.0); }

inline Tensor exp(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::tanh(v); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

/// max(0, x); the hinge [x]+ used by margin losses.
inline Tensor hinge(const Tensor& x) { return relu(x); }

inline Tensor square(const Tensor& x) {
  return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor sqrt(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::sqrt(v); },
                       [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

/// max(x, lo) with pass-through gradient above the floor.
inline Tensor clamp_min(const Tensor& x, double lo) {
  return detail::unary(x, [lo](double v) { return v < lo ? lo : v; },
                       [lo](double v, double) { return v < lo ? 0.0 : 1.0; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result({}, {s}, {&x}, [](detail::Node& self) {
    auto& gi = detail::grad_of(*self.inputs[0]);
    for (double& g : gi) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ContractError("mean of an empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.size()));
}

/// Sum over the last axis: [..., n] -> [...].
inline Tensor sum_rows(const Tensor& x) {
  auto [rows, cols] = detail::rows_cols(x);
  std::vector<double> out(rows, 0.0);
  auto X = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r] += X[r * cols + c];
  return detail::make_result(detail::drop_last(x.shape()), std::move(out), {&x},
                             [rows, cols](detail::Node& self) {
                               auto& gi = detail::grad_of(*self.inputs[0]);
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t c = 0; c < cols; ++c) gi[r * cols + c] += self.grad[r];
                             });
}

/// Numerically stable log(sum(exp(row))) over the last axis.
inline Tensor logsumexp_rows(const Tensor& x) {
  auto [rows, cols] = detail::rows_cols(x);
  if (cols == 0) throw DimensionError("logsumexp over an empty axis");
  std::vector<double> out(rows);
  auto X = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = X.data() + r * cols;
    double m = *std::max_element(row, row + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(row[c] - m);
    out[r] = m + std::log(s);
  }
  return detail::make_result(detail::drop_last(x.shape()), std::move(out), {&x},
                             [rows, cols](detail::Node& self) {
                               detail::Node& in = *self.inputs[0];
                               auto& gi = detail::grad_of(in);
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t c = 0; c < cols; ++c)
                                   gi[r * cols + c] +=
                                       self.grad[r] * std::exp(in.data[r * cols + c] - self.data[r]);
                             });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result(std::move(shape), std::move(out), {&x}, [](detail::Node& self) {
    auto& gi = detail::grad_of(*self.inputs[0]);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i];
  });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose needs a matrix, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  auto X = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = X[i * n + j];
  return detail::make_result({n, m}, std::move(out), {&x}, [m, n](detail::Node& self) {
    auto& gi = detail::grad_of(*self.inputs[0]);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gi[i * n + j] += self.grad[j * m + i];
  });
}

/// Rows of `x` (first axis) at `index`, in order; repeats allowed.
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> index) {
  if (x.rank() == 0) throw DimensionError("gather_rows on a scalar");
  const std::size_t rows = x.dim(0);
  const std::size_t width = rows == 0 ? 0 : x.size() / rows;
  for (std::size_t i : index) {
    if (i >= rows) {
      throw DimensionError("gather_rows index " + std::to_string(i) + " out of range for " +
                           shape_str(x.shape()));
    }
  }
  Shape shape = x.shape();
  shape[0] = index.size();
  std::vector<double> out(index.size() * width);
  auto X = x.data();
  for (std::size_t r = 0; r < index.size(); ++r)
    std::copy_n(X.begin() + static_cast<std::ptrdiff_t>(index[r] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(r * width));
  return detail::make_result(std::move(shape), std::move(out), {&x},
                             [index = std::move(index), width](detail::Node& self) {
                               auto& gi = detail::grad_of(*self.inputs[0]);
                               for (std::size_t r = 0; r < index.size(); ++r)
                                 for (std::size_t c = 0; c < width; ++c)
                                   gi[index[r] * width + c] += self.grad[r * width + c];
                             });
}

/// Concatenate along the first axis; trailing dimensions must agree.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows of zero tensors");
  Shape tail = detail::drop_last(parts[0].shape());
  Shape first = parts[0].shape();
  if (first.empty()) throw DimensionError("concat_rows on scalars");
  std::size_t rows = 0;
  std::vector<double> out;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size() || !std::equal(first.begin() + 1, first.end(), p.shape().begin() + 1)) {
      throw DimensionError("concat_rows: shapes " + shape_str(first) + " and " + shape_str(p.shape()));
    }
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape = first;
  shape[0] = rows;
  return detail::make_result_n(std::move(shape), std::move(out), parts, [](detail::Node& self) {
    std::size_t offset = 0;
    for (auto& in : self.inputs) {
      if (in->requires_grad) {
        auto& gi = detail::grad_of(*in);
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[offset + i];
      }
      offset += in->data.size();
    }
  });
}

/// out[r] = x[r, cols[r]] for a matrix x.
inline Tensor pick(const Tensor& x, std::span<const std::size_t> cols) {
  auto [rows, width] = detail::rows_cols(x);
  if (cols.size() != rows) {
    throw DimensionError("pick: " + std::to_string(cols.size()) + " indices for " + shape_str(x.shape()));
  }
  std::vector<std::size_t> flat(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (cols[r] >= width) throw DimensionError("pick: column " + std::to_string(cols[r]) + " out of range");
    flat[r] = r * width + cols[r];
  }
  std::vector<double> out(rows);
  auto X = x.data();
  for (std::size_t r = 0; r < rows; ++r) out[r] = X[flat[r]];
  return detail::make_result(detail::drop_last(x.shape()), std::move(out), {&x},
                             [flat = std::move(flat)](detail::Node& self) {
                               auto& gi = detail::grad_of(*self.inputs[0]);
                               for (std::size_t r = 0; r < flat.size(); ++r) gi[flat[r]] += self.grad[r];
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B.data() + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  return detail::make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](detail::Node& self) {
    detail::Node& na = *self.inputs[0];
    detail::Node& nb = *self.inputs[1];
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto& ga = detail::grad_of(na);  // dA = G * B^T
      std::vector<double> bt(n * k);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = nb.data[p * n + j];
      for (std::size_t i = 0; i < m; ++i) {
        double* arow = ga.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const double gv = g[i * n + j];
          if (gv == 0.0) continue;
          const double* brow = bt.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) arow[p] += gv * brow[p];
        }
      }
    }
    if (nb.requires_grad) {
      auto& gb = detail::grad_of(nb);  // dB = A^T * G
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = na.data[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
        }
    }
  });
}

/// Euclidean norm of each row (last axis). The subgradient at 0 is 0.
inline Tensor l2_norm_rows(const Tensor& x) {
  auto [rows, cols] = detail::rows_cols(x);
  std::vector<double> out(rows, 0.0);
  auto X = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += X[r * cols + c] * X[r * cols + c];
    out[r] = std::sqrt(s);
  }
  return detail::make_result(detail::drop_last(x.shape()), std::move(out), {&x},
                             [rows, cols](detail::Node& self) {
                               detail::Node& in = *self.inputs[0];
                               auto& gi = detail::grad_of(in);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 if (self.data[r] == 0.0) continue;
                                 const double s = self.grad[r] / self.data[r];
                                 for (std::size_t c = 0; c < cols; ++c)
                                   gi[r * cols + c] += s * in.data[r * cols + c];
                               }
                             });
}

/// Each row divided by its Euclidean norm. Zero rows raise NumericError.
inline Tensor normalize_rows(const Tensor& x) {
  auto [rows, cols] = detail::rows_cols(x);
  std::vector<double> norms(rows, 0.0);
  std::vector<double> out(x.size());
  auto X = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += X[r * cols + c] * X[r * cols + c];
    norms[r] = std::sqrt(s);
    if (!(norms[r] > 0.0) || !std::isfinite(norms[r])) {
      throw NumericError("normalize_rows: row " + std::to_string(r) + " has norm " +
                         std::to_string(norms[r]));
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = X[r * cols + c] / norms[r];
  }
  return detail::make_result(x.shape(), std::move(out), {&x},
                             [rows, cols, norms = std::move(norms)](detail::Node& self) {
                               auto& gi = detail::grad_of(*self.inputs[0]);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 // d(x/|x|) = (g - y (y.g)) / |x|
                                 double dot = 0.0;
                                 for (std::size_t c = 0; c < cols; ++c)
                                   dot += self.data[r * cols + c] * self.grad[r * cols + c];
                                 for (std::size_t c = 0; c < cols; ++c)
                                   gi[r * cols + c] +=
                                       (self.grad[r * cols + c] - self.data[r * cols + c] * dot) / norms[r];
                               }
                             });
}

/// Row-wise squared Euclidean distance ||a_r - b_r||^2.
inline Tensor sq_dist_rows(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("sq_dist_rows: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  return sum_rows(square(sub(a, b)));
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

namespace detail {

inline void require_no_nan(const Tensor& x, const char* op) {
  for (double v : x.data()) {
    if (std::isnan(v)) throw NumericError(std::string(op) + ": NaN in input");
  }
}

inline Tensor softmax_last(const Tensor& x) {
  auto [rows, cols] = rows_cols(x);
  std::vector<double> out(x.size());
  auto X = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = X.data() + r * cols;
    double m = *std::max_element(row, row + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += (out[r * cols + c] = std::exp(row[c] - m));
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= s;
  }
  return make_result(x.shape(), std::move(out), {&x}, [rows, cols](Node& self) {
    auto& gi = grad_of(*self.inputs[0]);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += self.grad[r * cols + c] * self.data[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        gi[r * cols + c] += self.data[r * cols + c] * (self.grad[r * cols + c] - dot);
    }
  });
}

}  // namespace detail

/// Softmax along `axis` (negative counts from the end). Max-subtracted.
inline Tensor softmax(const Tensor& x, int axis = -1) {
  detail::require_no_nan(x, "softmax");
  if (x.rank() == 0) return detail::softmax_last(reshape(x, {1}));
  const int r = static_cast<int>(x.rank());
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
  if (ax == r - 1) return detail::softmax_last(x);
  if (r == 2 && ax == 0) return transpose(detail::softmax_last(transpose(x)));
  throw DimensionError("softmax: only the last axis (or axis 0 of a matrix) is supported");
}

/// log(softmax(x)) over the last axis.
inline Tensor log_softmax(const Tensor& x) {
  detail::require_no_nan(x, "log_softmax");
  auto [rows, cols] = detail::rows_cols(x);
  Tensor lse = logsumexp_rows(x);
  if (x.rank() <= 1) return sub(x, lse);
  // Expand the per-row normalizer to the full matrix explicitly.
  std::vector<std::size_t> idx(rows * cols);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i / cols;
  return sub(x, reshape(gather_rows(reshape(lse, {rows}), std::move(idx)), x.shape()));
}

// ---------------------------------------------------------------------------
// Backward pass and gradient checking
// ---------------------------------------------------------------------------

/// Accumulates d(root)/d(t) into every reachable tensor with requires_grad.
/// Grads of intermediate nodes are reset; leaf grads accumulate across calls.
inline void backward(const Tensor& root) {
  if (!root.defined() || root.size() != 1) {
    throw ContractError("backward requires a scalar root, got " +
                        (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
  }
  if (!root.requires_grad()) return;

  std::vector<detail::Node*> order;
  std::vector<detail::Node*> stack{root.node().get()};
  std::unordered_set<const detail::Node*> seen;
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (auto& in : n->inputs)
      if (in->requires_grad && !seen.contains(in.get())) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(), [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });
  for (detail::Node* n : order) {
    if (n->rule) n->grad.assign(n->data.size(), 0.0);
    else detail::grad_of(*n);
  }
  root.node()->grad[0] += 1.0;
  for (detail::Node* n : order) {
    if (n->rule) n->rule(*n);
  }
}

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar function of one tensor.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw ContractError("grad_check: step must lie in [1e-7, 1e-3]");
  Tensor probe = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  auto eval = [&]() {
    Tensor y = f(probe);
    if (y.size() != 1) throw ContractError("grad_check: function must return a scalar");
    double v = y.item();
    if (!std::isfinite(v)) throw NumericError("grad_check: function returned a non-finite value");
    return y;
  };
  Tensor y = eval();
  backward(y);
  std::vector<double> analytic = probe.has_grad() ? std::vector<double>(probe.grad().begin(), probe.grad().end())
                                                  : std::vector<double>(probe.size(), 0.0);
  auto values = probe.mutable_data();
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + h;
    const double fp = eval().item();
    values[i] = orig - h;
    const double fm = eval().item();
    values[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace tripledml
