#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// Operations executed while a Graph is active are recorded on its tape when
// at least one input requires a gradient. Outside a Graph every op is a
// plain forward computation, which is what evaluation code uses.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tardis/errors.hpp"

namespace tardis {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    os << (i ? "," : "") << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) {
      grad.assign(value.size(), 0.0);
    }
    return grad;
  }
};

}  // namespace detail

class Tensor;
class Graph;
void backward(const Tensor& loss);

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_size(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_size(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_size(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return from({n}, std::move(values), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return from({rows, cols}, std::move(values), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({}, {v}, requires_grad);
  }

  static Tensor one_hot(std::size_t n, std::size_t index) {
    std::vector<double> v(n, 0.0);
    v.at(index) = 1.0;
    return vector(std::move(v));
  }

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const Shape& shape() const { return node_->shape; }
  [[nodiscard]] std::size_t rank() const { return node_->shape.size(); }
  [[nodiscard]] std::size_t size() const { return node_->value.size(); }
  [[nodiscard]] std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  [[nodiscard]] const char* op_name() const { return node_->op; }

  [[nodiscard]] std::span<const double> values() const { return node_->value; }
  /// Direct write access; only meant for leaves (parameters, optimizer).
  [[nodiscard]] std::span<double> mutable_values() { return node_->value; }

  [[nodiscard]] bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  [[nodiscard]] std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }
  void clear_grad() { node_->grad.clear(); }

  [[nodiscard]] double item() const {
    if (size() != 1) {
      throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    }
    return node_->value[0];
  }
  [[nodiscard]] double operator[](std::size_t i) const { return node_->value[i]; }
  [[nodiscard]] double at(std::size_t r, std::size_t c) const {
    return node_->value[r * node_->shape.at(1) + c];
  }

  /// Leaf copy of the current values, disconnected from any graph.
  [[nodiscard]] Tensor detach() const { return from(shape(), node_->value, false); }
  /// Independent leaf with the same values and requires_grad flag.
  [[nodiscard]] Tensor clone() const { return from(shape(), node_->value, requires_grad()); }

  [[nodiscard]] detail::Node* node() const { return node_.get(); }
  [[nodiscard]] const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Tape of executed ops. Constructing a Graph makes it the active graph of
/// the calling thread until it is destroyed.
class Graph {
 public:
  Graph() : previous_(active_slot()) { active_slot() = this; }
  ~Graph() { active_slot() = previous_; }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* active() { return active_slot(); }

  void record(std::shared_ptr<detail::Node> n) { tape_.push_back(std::move(n)); }
  [[nodiscard]] std::size_t size() const { return tape_.size(); }
  [[nodiscard]] bool contains(const detail::Node* n) const {
    return std::any_of(tape_.begin(), tape_.end(), [n](const auto& p) { return p.get() == n; });
  }

  /// Reverse sweep from `loss`. Parameter leaves accumulate into grad.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
      return;
    }
    loss.node()->ensure_grad()[0] += 1.0;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      detail::Node& n = **it;
      for (auto& in : n.inputs) {
        if (in->requires_grad) {
          in->ensure_grad();
        }
      }
      if (n.grad.empty() || !n.backward) {
        continue;
      }
      n.backward(n);
    }
  }

 private:
  static Graph*& active_slot() {
    thread_local Graph* slot = nullptr;
    return slot;
  }

  Graph* previous_;
  std::vector<std::shared_ptr<detail::Node>> tape_;
};

inline void backward(const Tensor& loss) {
  Graph* g = Graph::active();
  if (g == nullptr) {
    throw ValueError("backward: no active graph");
  }
  g->backward(loss);
}

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

/// Builds an op result; attaches the backward closure only when recording.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::vector<Tensor> inputs, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  Graph* g = Graph::active();
  const bool track = g != nullptr && std::any_of(inputs.begin(), inputs.end(),
                                                 [](const Tensor& t) { return t.requires_grad(); });
  if (track) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& t : inputs) {
      n->inputs.push_back(t.node_ptr());
    }
    n->backward = std::move(fn);
    g->record(n);
  }
  return Tensor(std::move(n));
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(a.shape()));
  }
}

template <class F, class D>
Tensor unary(const char* op, const Tensor& x, F f, D df) {
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = f(xv[i]);
  }
  return make_result(op, x.shape(), std::move(out), {x}, [df](Node& self) {
    Node& in = *self.inputs[0];
    if (!in.requires_grad) {
      return;
    }
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      in.grad[i] += self.grad[i] * df(in.value[i], self.value[i]);
    }
  });
}

inline double softplus_value(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      "sigmoid", x, [](double v) { return detail::sigmoid_value(v); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary(
      "softplus", x, [](double v) { return detail::softplus_value(v); },
      [](double v, double) { return detail::sigmoid_value(v); });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

/// x * c for a constant c.
inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(
      "scale", x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

/// x + c for a constant c.
inline Tensor add_constant(const Tensor& x, double c) {
  return detail::unary(
      "add_constant", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a[i] + b[i];
  }
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& in : self.inputs) {
      if (in->requires_grad) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          in->grad[i] += self.grad[i];
        }
      }
    }
  });
}

inline Tensor add(std::initializer_list<Tensor> terms) {
  if (terms.size() == 0) {
    throw ValueError("add: no terms");
  }
  auto it = terms.begin();
  Tensor acc = *it++;
  for (; it != terms.end(); ++it) {
    acc = add(acc, *it);
  }
  return acc;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a[i] - b[i];
  }
  return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& ia = *self.inputs[0];
    auto& ib = *self.inputs[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (ia.requires_grad) ia.grad[i] += self.grad[i];
      if (ib.requires_grad) ib.grad[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a[i] * b[i];
  }
  return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& ia = *self.inputs[0];
    auto& ib = *self.inputs[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (ia.requires_grad) ia.grad[i] += self.grad[i] * ib.value[i];
      if (ib.requires_grad) ib.grad[i] += self.grad[i] * ia.value[i];
    }
  });
}

/// s * x where s is a single-element tensor.
inline Tensor mul_scalar(const Tensor& s, const Tensor& x) {
  if (s.size() != 1) {
    throw ShapeError("mul_scalar: scale must hold one value, got shape " + shape_str(s.shape()) +
                     " vs " + shape_str(x.shape()));
  }
  const double sv = s[0];
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = sv * x[i];
  }
  return detail::make_result("mul_scalar", x.shape(), std::move(out), {s, x},
                             [](detail::Node& self) {
                               auto& is = *self.inputs[0];
                               auto& ix = *self.inputs[1];
                               double acc = 0.0;
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 acc += self.grad[i] * ix.value[i];
                                 if (ix.requires_grad) ix.grad[i] += self.grad[i] * is.value[0];
                               }
                               if (is.requires_grad) is.grad[0] += acc;
                             });
}

/// Adds vector `v` (length n) to every row of matrix `m` (r x n).
inline Tensor add_row(const Tensor& m, const Tensor& v) {
  detail::require_rank("add_row", m, 2);
  if (v.rank() != 1 || v.dim(0) != m.dim(1)) {
    throw ShapeError("add_row: shape mismatch " + shape_str(m.shape()) + " vs " +
                     shape_str(v.shape()));
  }
  const std::size_t rows = m.dim(0);
  const std::size_t cols = m.dim(1);
  std::vector<double> out(m.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = m[r * cols + c] + v[c];
    }
  }
  return detail::make_result("add_row", m.shape(), std::move(out), {m, v},
                             [rows, cols](detail::Node& self) {
                               auto& im = *self.inputs[0];
                               auto& iv = *self.inputs[1];
                               for (std::size_t r = 0; r < rows; ++r) {
                                 for (std::size_t c = 0; c < cols; ++c) {
                                   const double g = self.grad[r * cols + c];
                                   if (im.requires_grad) im.grad[r * cols + c] += g;
                                   if (iv.requires_grad) iv.grad[c] += g;
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

/// Four independent partial sums so the loop vectorizes without reassociation.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t k = 0;
  for (; k + 4 <= n; k += 4) {
    s0 += a[k] * b[k];
    s1 += a[k + 1] * b[k + 1];
    s2 += a[k + 2] * b[k + 2];
    s3 += a[k + 3] * b[k + 3];
  }
  for (; k < n; ++k) s0 += a[k] * b[k];
  return (s0 + s1) + (s2 + s3);
}

}  // namespace detail

/// Matrix product for (m x n)(n x p), (m x n)(n), (n)(n x p) and (n)(n).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool a_vec = a.rank() == 1;
  const bool b_vec = b.rank() == 1;
  if (a.rank() < 1 || a.rank() > 2 || b.rank() < 1 || b.rank() > 2) {
    throw ShapeError("matmul: unsupported ranks " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a_vec ? 1 : a.dim(0);
  const std::size_t n = a_vec ? a.dim(0) : a.dim(1);
  const std::size_t n2 = b.dim(0);
  const std::size_t p = b_vec ? 1 : b.dim(1);
  if (n != n2) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * p, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  if (p == 1) {
    // matrix-vector: one dot product per row
    return detail::make_result(
        "matmul", a_vec ? Shape{} : Shape{m},
        [&] {
          for (std::size_t i = 0; i < m; ++i) {
            out[i] = detail::dot(av.data() + i * n, bv.data(), n);
          }
          return std::move(out);
        }(),
        {a, b}, [m, n](detail::Node& self) {
          auto& ia = *self.inputs[0];
          auto& ib = *self.inputs[1];
          const double* g = self.grad.data();
          if (ia.requires_grad) {
            for (std::size_t i = 0; i < m; ++i) {
              double* grow = ia.grad.data() + i * n;
              const double gi = g[i];
              for (std::size_t k = 0; k < n; ++k) grow[k] += gi * ib.value[k];
            }
          }
          if (ib.requires_grad) {
            for (std::size_t i = 0; i < m; ++i) {
              const double* arow = ia.value.data() + i * n;
              const double gi = g[i];
              for (std::size_t k = 0; k < n; ++k) ib.grad[k] += gi * arow[k];
            }
          }
        });
  }
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = av[i * n + k];
      if (aik == 0.0) continue;
      const double* brow = bv.data() + k * p;
      double* orow = out.data() + i * p;
      for (std::size_t j = 0; j < p; ++j) {
        orow[j] += aik * brow[j];
      }
    }
  }
  Shape shape;
  if (!a_vec) shape.push_back(m);
  if (!b_vec) shape.push_back(p);
  return detail::make_result("matmul", std::move(shape), std::move(out), {a, b},
                             [m, n, p](detail::Node& self) {
                               auto& ia = *self.inputs[0];
                               auto& ib = *self.inputs[1];
                               const double* g = self.grad.data();
                               if (ia.requires_grad) {
                                 // dA = G B^T
                                 for (std::size_t i = 0; i < m; ++i) {
                                   for (std::size_t k = 0; k < n; ++k) {
                                     ia.grad[i * n + k] +=
                                         detail::dot(g + i * p, ib.value.data() + k * p, p);
                                   }
                                 }
                               }
                               if (ib.requires_grad) {
                                 // dB = A^T G
                                 for (std::size_t i = 0; i < m; ++i) {
                                   for (std::size_t k = 0; k < n; ++k) {
                                     const double aik = ia.value[i * n + k];
                                     if (aik == 0.0) continue;
                                     double* brow = ib.grad.data() + k * p;
                                     for (std::size_t j = 0; j < p; ++j) {
                                       brow[j] += aik * g[i * p + j];
                                     }
                                   }
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return detail::make_result("sum", {}, {s}, {x}, [](detail::Node& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    for (double& g : in.grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.size() == 0) {
    throw ShapeError("mean: empty tensor " + shape_str(x.shape()));
  }
  const double inv = 1.0 / static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x.values()) s += v;
  return detail::make_result("mean", {}, {s * inv}, {x}, [inv](detail::Node& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    for (double& g : in.grad) g += self.grad[0] * inv;
  });
}

// ---------------------------------------------------------------------------
// Softmax family (last axis; rank 1 or 2)

namespace detail {

inline void softmax_rows(std::span<const double> in, std::span<double> out, std::size_t cols) {
  for (std::size_t r = 0; r * cols < in.size(); ++r) {
    const double* x = in.data() + r * cols;
    double* y = out.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      z += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
  }
}

inline std::size_t last_axis(const char* op, const Tensor& x) {
  if (x.rank() < 1 || x.rank() > 2) {
    throw ShapeError(std::string(op) + ": expected rank 1 or 2, got shape " + shape_str(x.shape()));
  }
  const std::size_t cols = x.shape().back();
  if (cols == 0) {
    throw ShapeError(std::string(op) + ": empty axis in shape " + shape_str(x.shape()));
  }
  return cols;
}

}  // namespace detail

inline Tensor softmax(const Tensor& x) {
  const std::size_t cols = detail::last_axis("softmax", x);
  std::vector<double> out(x.size());
  detail::softmax_rows(x.values(), out, cols);
  return detail::make_result("softmax", x.shape(), std::move(out), {x},
                             [cols](detail::Node& self) {
                               auto& in = *self.inputs[0];
                               if (!in.requires_grad) return;
                               for (std::size_t r = 0; r * cols < self.value.size(); ++r) {
                                 const double* y = self.value.data() + r * cols;
                                 const double* g = self.grad.data() + r * cols;
                                 double dot = 0.0;
                                 for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
                                 for (std::size_t c = 0; c < cols; ++c) {
                                   in.grad[r * cols + c] += y[c] * (g[c] - dot);
                                 }
                               }
                             });
}

inline Tensor log_softmax(const Tensor& x) {
  const std::size_t cols = detail::last_axis("log_softmax", x);
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r * cols < x.size(); ++r) {
    const double* xi = x.values().data() + r * cols;
    const double mx = *std::max_element(xi, xi + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xi[c] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xi[c] - lz;
  }
  return detail::make_result("log_softmax", x.shape(), std::move(out), {x},
                             [cols](detail::Node& self) {
                               auto& in = *self.inputs[0];
                               if (!in.requires_grad) return;
                               for (std::size_t r = 0; r * cols < self.value.size(); ++r) {
                                 const double* y = self.value.data() + r * cols;
                                 const double* g = self.grad.data() + r * cols;
                                 double gs = 0.0;
                                 for (std::size_t c = 0; c < cols; ++c) gs += g[c];
                                 for (std::size_t c = 0; c < cols; ++c) {
                                   in.grad[r * cols + c] += g[c] - std::exp(y[c]) * gs;
                                 }
                               }
                             });
}

/// -sum_k target[k] * log softmax(logits)[k], computed with log-sum-exp.
inline Tensor cross_entropy_with_softmax(const Tensor& logits, const Tensor& target) {
  detail::require_same_shape("cross_entropy_with_softmax", logits, target);
  detail::require_rank("cross_entropy_with_softmax", logits, 1);
  const std::size_t n = detail::last_axis("cross_entropy_with_softmax", logits);
  std::vector<double> p(n);
  detail::softmax_rows(logits.values(), p, n);
  const double mx = *std::max_element(logits.values().begin(), logits.values().end());
  double z = 0.0;
  for (double v : logits.values()) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  double loss = 0.0;
  double tsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    loss -= target[i] * (logits[i] - lz);
    tsum += target[i];
  }
  return detail::make_result(
      "cross_entropy_with_softmax", {}, {loss}, {logits, target},
      [p = std::move(p), tsum, lz](detail::Node& self) {
        auto& il = *self.inputs[0];
        auto& it = *self.inputs[1];
        const double g = self.grad[0];
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (il.requires_grad) il.grad[i] += g * (p[i] * tsum - it.value[i]);
          if (it.requires_grad) it.grad[i] -= g * (il.value[i] - lz);
        }
      });
}

/// Sum over elements of the Bernoulli cross-entropy between sigmoid(logits)
/// and target, in the numerically stable max(z,0) - z*y + log1p(exp(-|z|)) form.
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& target) {
  detail::require_same_shape("bce_with_logits", logits, target);
  double loss = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    loss += std::max(z, 0.0) - z * target[i] + std::log1p(std::exp(-std::abs(z)));
  }
  return detail::make_result("bce_with_logits", {}, {loss}, {logits, target},
                             [](detail::Node& self) {
                               auto& il = *self.inputs[0];
                               auto& it = *self.inputs[1];
                               const double g = self.grad[0];
                               for (std::size_t i = 0; i < il.value.size(); ++i) {
                                 const double z = il.value[i];
                                 if (il.requires_grad) {
                                   il.grad[i] += g * (detail::sigmoid_value(z) - it.value[i]);
                                 }
                                 if (it.requires_grad) it.grad[i] -= g * z;
                               }
                             });
}

// ---------------------------------------------------------------------------
// Structural

/// Concatenates along `axis`: rank-1 inputs on axis 0, rank-2 inputs on axis 0 or 1.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis = 0) {
  if (parts.empty()) {
    throw ValueError("concat: no inputs");
  }
  const std::size_t rank = parts[0].rank();
  if (rank < 1 || rank > 2 || axis >= rank) {
    throw ShapeError("concat: unsupported axis " + std::to_string(axis) + " for shape " +
                     shape_str(parts[0].shape()));
  }
  for (const auto& p : parts) {
    if (p.rank() != rank || (rank == 2 && p.dim(1 - axis) != parts[0].dim(1 - axis))) {
      throw ShapeError("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
  }
  Shape shape = parts[0].shape();
  shape[axis] = 0;
  for (const auto& p : parts) shape[axis] += p.dim(axis);
  std::vector<double> out;
  out.reserve(shape_size(shape));
  std::vector<std::size_t> offsets;
  if (rank == 1 || axis == 0) {
    for (const auto& p : parts) {
      offsets.push_back(out.size());
      out.insert(out.end(), p.values().begin(), p.values().end());
    }
  } else {
    const std::size_t rows = shape[0];
    std::size_t col = 0;
    for (const auto& p : parts) {
      offsets.push_back(col);
      col += p.dim(1);
    }
    out.assign(shape_size(shape), 0.0);
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const std::size_t w = parts[pi].dim(1);
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(parts[pi].values().data() + r * w, w, out.data() + r * shape[1] + offsets[pi]);
      }
    }
  }
  const bool column_mode = rank == 2 && axis == 1;
  const std::size_t out_cols = rank == 2 ? shape[1] : 0;
  return detail::make_result("concat", shape, std::move(out), parts,
                             [offsets, column_mode, out_cols](detail::Node& self) {
                               for (std::size_t pi = 0; pi < self.inputs.size(); ++pi) {
                                 auto& in = *self.inputs[pi];
                                 if (!in.requires_grad) continue;
                                 if (!column_mode) {
                                   for (std::size_t i = 0; i < in.grad.size(); ++i) {
                                     in.grad[i] += self.grad[offsets[pi] + i];
                                   }
                                 } else {
                                   const std::size_t w = in.shape[1];
                                   for (std::size_t r = 0; r < in.shape[0]; ++r) {
                                     for (std::size_t c = 0; c < w; ++c) {
                                       in.grad[r * w + c] +=
                                           self.grad[r * out_cols + offsets[pi] + c];
                                     }
                                   }
                                 }
                               }
                             });
}

/// Elements [begin, end) of a rank-1 tensor.
inline Tensor slice(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_rank("slice", x, 1);
  if (begin > end || end > x.size()) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of bounds for shape " + shape_str(x.shape()));
  }
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(begin),
                          x.values().begin() + static_cast<std::ptrdiff_t>(end));
  return detail::make_result("slice", {end - begin}, std::move(out), {x},
                             [begin](detail::Node& self) {
                               auto& in = *self.inputs[0];
                               if (!in.requires_grad) return;
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 in.grad[begin + i] += self.grad[i];
                               }
                             });
}

/// Row `i` of a matrix as a rank-1 tensor.
inline Tensor gather_row(const Tensor& m, std::size_t i) {
  detail::require_rank("gather_row", m, 2);
  if (i >= m.dim(0)) {
    throw ShapeError("gather_row: row " + std::to_string(i) + " out of range for shape " +
                     shape_str(m.shape()));
  }
  const std::size_t cols = m.dim(1);
  std::vector<double> out(m.values().begin() + static_cast<std::ptrdiff_t>(i * cols),
                          m.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * cols));
  return detail::make_result("gather_row", {cols}, std::move(out), {m},
                             [i, cols](detail::Node& self) {
                               auto& in = *self.inputs[0];
                               if (!in.requires_grad) return;
                               for (std::size_t c = 0; c < cols; ++c) {
                                 in.grad[i * cols + c] += self.grad[c];
                               }
                             });
}

/// Copy of `m` with row `i` replaced by `v`; `m` itself is left untouched.
inline Tensor scatter_row(const Tensor& m, std::size_t i, const Tensor& v) {
  detail::require_rank("scatter_row", m, 2);
  if (v.rank() != 1 || v.dim(0) != m.dim(1)) {
    throw ShapeError("scatter_row: shape mismatch " + shape_str(m.shape()) + " vs " +
                     shape_str(v.shape()));
  }
  if (i >= m.dim(0)) {
    throw ShapeError("scatter_row: row " + std::to_string(i) + " out of range for shape " +
                     shape_str(m.shape()));
  }
  const std::size_t cols = m.dim(1);
  std::vector<double> out(m.values().begin(), m.values().end());
  std::copy(v.values().begin(), v.values().end(), out.begin() + static_cast<std::ptrdiff_t>(i * cols));
  return detail::make_result("scatter_row", m.shape(), std::move(out), {m, v},
                             [i, cols](detail::Node& self) {
                               auto& im = *self.inputs[0];
                               auto& iv = *self.inputs[1];
                               const std::size_t lo = i * cols;
                               const std::size_t hi = lo + cols;
                               if (im.requires_grad) {
                                 for (std::size_t j = 0; j < self.grad.size(); ++j) {
                                   if (j < lo || j >= hi) im.grad[j] += self.grad[j];
                                 }
                               }
                               if (iv.requires_grad) {
                                 for (std::size_t c = 0; c < cols; ++c) {
                                   iv.grad[c] += self.grad[lo + c];
                                 }
                               }
                             });
}

/// Forward: one-hot at `index`. Backward: the adjoint passes unchanged to
/// `soft`, i.e. the one-hot is treated as if it were `soft`.
inline Tensor straight_through(const Tensor& soft, std::size_t index) {
  detail::require_rank("straight_through", soft, 1);
  if (index >= soft.size()) {
    throw ShapeError("straight_through: index " + std::to_string(index) + " out of range for " +
                     shape_str(soft.shape()));
  }
  std::vector<double> out(soft.size(), 0.0);
  out[index] = 1.0;
  return detail::make_result("straight_through", soft.shape(), std::move(out), {soft},
                             [](detail::Node& self) {
                               auto& in = *self.inputs[0];
                               if (!in.requires_grad) return;
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 in.grad[i] += self.grad[i];
                               }
                             });
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace tardis
