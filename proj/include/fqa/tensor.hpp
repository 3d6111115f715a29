// Minimal reverse-mode automatic differentiation over dense float64 arrays.
//
// A Tensor is a shared handle to a Node holding its value, an optional
// gradient buffer and (for op results) a backward closure. Op results are
// appended to the thread's active Tape; Tape::backward walks the tape in
// reverse creation order, which is a valid topological order.
//
// When no Tape is active, ops compute forward values only (inference mode).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif

namespace fqa {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class RankError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class EmptySetError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first written
  bool requires_grad = false;
  bool is_leaf = true;
  std::size_t tape_index = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values) {
    if (numel_of(shape) != values.size()) {
      throw DimensionError("tensor shape " + to_string(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return Tensor(std::move(node));
  }
  static Tensor zeros(Shape shape) {
    const auto n = numel_of(shape);
    return constant(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape shape, double v) {
    const auto n = numel_of(shape);
    return constant(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return constant({}, {v}); }
  /// Leaf that accumulates gradients across backward passes.
  static Tensor parameter(Shape shape, std::vector<double> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double item() const {
    if (numel() != 1) throw RankError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  /// Gradient buffer; zeros if nothing has been accumulated yet.
  std::vector<double> grad() const {
    return has_grad() ? node_->grad : std::vector<double>(numel(), 0.0);
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Ordered record of op nodes for one forward pass. Constructing a Tape makes
/// it the active tape of the calling thread until it is destroyed.
class Tape {
 public:
  Tape() : previous_(active_slot()) { active_slot() = this; }
  ~Tape() { active_slot() = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_slot(); }

  void record(const std::shared_ptr<Node>& node) {
    node->tape_index = nodes_.size();
    nodes_.push_back(node);
  }
  std::size_t size() const { return nodes_.size(); }

  /// Propagates d(loss)/d(x) to every requires_grad leaf reachable from
  /// `loss`. Leaf gradients accumulate across calls.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
      throw RankError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (!loss.requires_grad()) return;
    Node& root = loss.node();
    if (root.is_leaf) {
      root.ensure_grad();
      root.grad[0] += 1.0;
      return;
    }
    for (auto& n : nodes_) n->grad.clear();
    root.ensure_grad();
    root.grad[0] = 1.0;
    for (std::size_t i = root.tape_index + 1; i-- > 0;) {
      Node& n = *nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(n);
    }
  }

 private:
  static Tape*& active_slot() {
    thread_local Tape* slot = nullptr;
    return slot;
  }
  std::vector<std::shared_ptr<Node>> nodes_;
  Tape* previous_;
};

namespace detail {

/// y[m x n] += x[m x k] * w[k x n]. Each output element accumulates its own
/// fused multiply-adds in ascending k order, so results depend neither on the
/// row's position in the batch nor on buffer alignment or the code path.
inline void gemm_accumulate(const double* __restrict x, const double* __restrict w, double* __restrict y,
                            std::size_t m, std::size_t k, std::size_t n) {
  std::size_t i = 0;
#if defined(__AVX2__) && defined(__FMA__)
  // 4 x 8 register tiles.
  for (; i + 4 <= m; i += 4) {
    const double* x0 = x + i * k;
    double* y0 = y + i * n;
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      __m256d c[4][2];
      for (int r = 0; r < 4; ++r) {
        c[r][0] = _mm256_loadu_pd(y0 + r * n + j);
        c[r][1] = _mm256_loadu_pd(y0 + r * n + j + 4);
      }
      for (std::size_t kk = 0; kk < k; ++kk) {
        const __m256d w0 = _mm256_loadu_pd(w + kk * n + j), w1 = _mm256_loadu_pd(w + kk * n + j + 4);
        for (int r = 0; r < 4; ++r) {
          const __m256d a = _mm256_broadcast_sd(x0 + r * k + kk);
          c[r][0] = _mm256_fmadd_pd(a, w0, c[r][0]);
          c[r][1] = _mm256_fmadd_pd(a, w1, c[r][1]);
        }
      }
      for (int r = 0; r < 4; ++r) {
        _mm256_storeu_pd(y0 + r * n + j, c[r][0]);
        _mm256_storeu_pd(y0 + r * n + j + 4, c[r][1]);
      }
    }
    for (; j + 4 <= n; j += 4) {
      __m256d c[4];
      for (int r = 0; r < 4; ++r) c[r] = _mm256_loadu_pd(y0 + r * n + j);
      for (std::size_t kk = 0; kk < k; ++kk) {
        const __m256d w0 = _mm256_loadu_pd(w + kk * n + j);
        for (int r = 0; r < 4; ++r) c[r] = _mm256_fmadd_pd(_mm256_broadcast_sd(x0 + r * k + kk), w0, c[r]);
      }
      for (int r = 0; r < 4; ++r) _mm256_storeu_pd(y0 + r * n + j, c[r]);
    }
    for (; j < n; ++j)
      for (std::size_t r = 0; r < 4; ++r) {
        double acc = y0[r * n + j];
        for (std::size_t kk = 0; kk < k; ++kk) acc = std::fma(x0[r * k + kk], w[kk * n + j], acc);
        y0[r * n + j] = acc;
      }
  }
#else
  // Four rows share each load of w; the per-element operation sequence is unchanged.
  for (; i + 4 <= m; i += 4) {
    double* __restrict y0 = y + i * n;
    double* __restrict y1 = y0 + n;
    double* __restrict y2 = y1 + n;
    double* __restrict y3 = y2 + n;
    const double* x0 = x + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double a0 = x0[kk], a1 = x0[k + kk], a2 = x0[2 * k + kk], a3 = x0[3 * k + kk];
      const double* __restrict wk = w + kk * n;
      for (std::size_t j = 0; j < n; ++j) {
        y0[j] = std::fma(a0, wk[j], y0[j]);
        y1[j] = std::fma(a1, wk[j], y1[j]);
        y2[j] = std::fma(a2, wk[j], y2[j]);
        y3[j] = std::fma(a3, wk[j], y3[j]);
      }
    }
  }
#endif
  for (; i < m; ++i) {
    double* __restrict yi = y + i * n;
    const double* xi = x + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double a = xi[kk];
      const double* __restrict wk = w + kk * n;
      for (std::size_t j = 0; j < n; ++j) yi[j] = std::fma(a, wk[j], yi[j]);
    }
  }
}

inline std::vector<double> transposed(const double* x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = x[r * cols + c];
  return t;
}

/// Backward of y = x * w for g = dL/dy [m x n]: gx += g * w^T, gw += x^T * g.
inline void gemm_backward(const double* g, const double* x, const double* w, double* gx, double* gw,
                          std::size_t m, std::size_t k, std::size_t n) {
  if (gx) gemm_accumulate(g, transposed(w, k, n).data(), gx, m, n, k);
  if (gw) gemm_accumulate(transposed(x, m, k).data(), g, gw, k, m, n);
}

inline bool needs_tape(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

/// Wraps a forward result into a Tensor, attaching the backward closure when
/// any input requires gradients and a tape is active.
inline Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool grad = false;
  if (Tape::active() != nullptr) {
    for (const auto& t : inputs) grad = grad || t.requires_grad();
  }
  if (grad) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward = std::move(backward);
    Tape::active()->record(node);
  }
  return Tensor(std::move(node));
}

/// Input i's gradient buffer, or nullptr when it does not take gradients.
inline double* grad_of(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return in.grad.data();
}

inline bool is_suffix(const Shape& whole, const Shape& tail) {
  if (tail.size() > whole.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), whole.rbegin());
}

inline bool is_prefix(const Shape& whole, const Shape& head) {
  if (head.size() > whole.size()) return false;
  return std::equal(head.begin(), head.end(), whole.begin());
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv_from_out_in) {
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return make_result(x.shape(), std::move(out), {x}, [deriv_from_out_in](Node& self) {
    double* gx = grad_of(self, 0);
    if (!gx) return;
    const auto& xin = self.inputs[0]->value;
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      gx[i] += self.grad[i] * deriv_from_out_in(self.value[i], xin[i]);
    }
  });
}

enum class BinaryKind { Add, Sub, Mul };

inline Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw DimensionError(std::string(name) + ": incompatible shapes " + to_string(a.shape()) +
                         " and " + to_string(b.shape()));
  }
  const std::size_t n = a.numel();
  const std::size_t m = b.numel();
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double y = bv[i % m];
    switch (kind) {
      case BinaryKind::Add: out[i] = av[i] + y; break;
      case BinaryKind::Sub: out[i] = av[i] - y; break;
      case BinaryKind::Mul: out[i] = av[i] * y; break;
    }
  }
  return make_result(a.shape(), std::move(out), {a, b}, [kind, n, m](Node& self) {
    const auto& g = self.grad;
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (double* ga = grad_of(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        ga[i] += kind == BinaryKind::Mul ? g[i] * bv[i % m] : g[i];
      }
    }
    if (double* gb = grad_of(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) {
        switch (kind) {
          case BinaryKind::Add: gb[i % m] += g[i]; break;
          case BinaryKind::Sub: gb[i % m] -= g[i]; break;
          case BinaryKind::Mul: gb[i % m] += g[i] * av[i]; break;
        }
      }
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops. Binary ops broadcast `b` over the leading dimensions of
// `a`: b's shape must equal a trailing suffix of a's shape.

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, detail::BinaryKind::Add, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, detail::BinaryKind::Sub, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, detail::BinaryKind::Mul, "mul");
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double s, double) { return s * (1.0 - s); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); }, [](double t, double) { return 1.0 - t * t; });
}

/// log(1 + e^x), evaluated without overflow.
inline Tensor softplus(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double, double in) {
        if (in >= 0) return 1.0 / (1.0 + std::exp(-in));
        const double e = std::exp(in);
        return e / (1.0 + e);
      });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v > 0 ? v : 0.0; },
      [](double, double in) { return in > 0 ? 1.0 : 0.0; });
}

/// Elementwise clamp to [lo, hi]; gradient passes only strictly inside.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return detail::unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double, double in) { return (in > lo && in < hi) ? 1.0 : 0.0; });
}

/// 1 - x.
inline Tensor one_minus(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return 1.0 - v; }, [](double, double) { return -1.0; });
}

/// Multiplies each contiguous block of `x` by the matching entry of `s`,
/// where s's shape is a leading prefix of x's shape (e.g. [E,n] against
/// [E,n,dv]).
inline Tensor mul_rows(const Tensor& x, const Tensor& s) {
  if (!detail::is_prefix(x.shape(), s.shape()) || s.numel() == 0) {
    throw DimensionError("mul_rows: " + to_string(s.shape()) + " is not a prefix of " +
                         to_string(x.shape()));
  }
  const std::size_t rows = s.numel();
  const std::size_t block = x.numel() / rows;
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  const auto& sv = s.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < block; ++j) out[r * block + j] = xv[r * block + j] * sv[r];
  }
  return detail::make_result(x.shape(), std::move(out), {x, s}, [rows, block](Node& self) {
    const auto& g = self.grad;
    const auto& xv = self.inputs[0]->value;
    const auto& sv = self.inputs[1]->value;
    if (double* gx = detail::grad_of(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < block; ++j) gx[r * block + j] += g[r * block + j] * sv[r];
      }
    }
    if (double* gs = detail::grad_of(self, 1)) {
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < block; ++j) acc += g[r * block + j] * xv[r * block + j];
        gs[r] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + to_string(a.shape()) + " by " +
                         to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_accumulate(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    detail::gemm_backward(self.grad.data(), self.inputs[0]->value.data(), self.inputs[1]->value.data(),
                          detail::grad_of(self, 0), detail::grad_of(self, 1), m, k, n);
  });
}

/// x[m×k] · W[k×n] + b[n], fused.
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0) || b.numel() != w.dim(1)) {
    throw DimensionError("affine: incompatible shapes " + to_string(x.shape()) + ", " +
                         to_string(w.shape()) + ", " + to_string(b.shape()));
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) std::copy(b.data().begin(), b.data().end(), out.begin() + i * n);
  detail::gemm_accumulate(x.data().data(), w.data().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), {x, w, b}, [m, k, n](Node& self) {
    const double* g = self.grad.data();
    detail::gemm_backward(g, self.inputs[0]->value.data(), self.inputs[1]->value.data(), detail::grad_of(self, 0),
                          detail::grad_of(self, 1), m, k, n);
    if (double* gb = detail::grad_of(self, 2)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

/// Sum over the last axis of k ⊙ q: [..., d] -> [...].
inline Tensor rowwise_dot(const Tensor& k, const Tensor& q) {
  if (k.shape() != q.shape() || k.rank() == 0) {
    throw DimensionError("rowwise_dot: shapes " + to_string(k.shape()) + " and " +
                         to_string(q.shape()) + " differ");
  }
  const std::size_t d = k.shape().back();
  const std::size_t rows = d == 0 ? 0 : k.numel() / d;
  Shape out_shape(k.shape().begin(), k.shape().end() - 1);
  std::vector<double> out(rows, 0.0);
  const auto& kv = k.values();
  const auto& qv = q.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += kv[r * d + j] * qv[r * d + j];
    out[r] = acc;
  }
  return detail::make_result(std::move(out_shape), std::move(out), {k, q}, [rows, d](Node& self) {
    const auto& g = self.grad;
    const auto& kv = self.inputs[0]->value;
    const auto& qv = self.inputs[1]->value;
    if (double* gk = detail::grad_of(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gk[r * d + j] += g[r] * qv[r * d + j];
    }
    if (double* gq = detail::grad_of(self, 1)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gq[r * d + j] += g[r] * kv[r * d + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Structural ops.

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return detail::make_result(std::move(shape), x.values(), {x}, [](Node& self) {
    if (double* gx = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    }
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no parts");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range for " + to_string(ref));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == ref[i];
    if (!ok) {
      throw DimensionError("concat: ragged shapes " + to_string(ref) + " and " + to_string(s));
    }
    widths.push_back(s[axis] * inner);
    total += s[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  const std::size_t row = total * inner;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& v = parts[p].values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * widths[p]), widths[p],
                  out.begin() + static_cast<std::ptrdiff_t>(o * row + offset));
    }
    offset += widths[p];
  }
  return detail::make_result(std::move(out_shape), std::move(out), parts,
                             [widths, outer, row](Node& self) {
                               std::size_t offset = 0;
                               for (std::size_t p = 0; p < widths.size(); ++p) {
                                 if (double* gp = detail::grad_of(self, p)) {
                                   for (std::size_t o = 0; o < outer; ++o)
                                     for (std::size_t j = 0; j < widths[p]; ++j)
                                       gp[o * widths[p] + j] += self.grad[o * row + offset + j];
                                 }
                                 offset += widths[p];
                               }
                             });
}

/// Columns [begin, end) of the last axis.
inline Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || begin > end || end > x.shape().back()) {
    throw DimensionError("slice_last: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + to_string(x.shape()));
  }
  const std::size_t width = x.shape().back();
  const std::size_t rows = width == 0 ? 0 : x.numel() / width;
  const std::size_t w = end - begin;
  Shape out_shape = x.shape();
  out_shape.back() = w;
  std::vector<double> out(rows * w);
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = xv[r * width + begin + j];
  return detail::make_result(std::move(out_shape), std::move(out), {x},
                             [rows, width, begin, w](Node& self) {
                               if (double* gx = detail::grad_of(self, 0)) {
                                 for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < w; ++j)
                                     gx[r * width + begin + j] += self.grad[r * w + j];
                               }
                             });
}

/// Rows of x[R×d] selected by `index`; backward scatter-adds.
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> index) {
  if (x.rank() != 2) throw DimensionError("gather_rows: expected a matrix, got " + to_string(x.shape()));
  const std::size_t d = x.dim(1);
  const auto& xv = x.values();
  std::vector<double> out(index.size() * d);
  for (std::size_t e = 0; e < index.size(); ++e) {
    if (index[e] >= x.dim(0)) throw DimensionError("gather_rows: index out of range");
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(index[e] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(e * d));
  }
  const std::size_t rows = index.size();
  return detail::make_result({rows, d}, std::move(out), {x}, [index = std::move(index), d](Node& self) {
    if (double* gx = detail::grad_of(self, 0)) {
      for (std::size_t e = 0; e < index.size(); ++e)
        for (std::size_t j = 0; j < d; ++j) gx[index[e] * d + j] += self.grad[e * d + j];
    }
  });
}

/// Row-wise unit vectors x/‖x‖; rows with ‖x‖ < eps map to zero.
inline Tensor unit_rows(const Tensor& x, double eps = 1e-12) {
  if (x.rank() != 2) throw DimensionError("unit_rows: expected a matrix, got " + to_string(x.shape()));
  const std::size_t rows = x.dim(0), d = x.dim(1);
  std::vector<double> out(x.numel(), 0.0);
  std::vector<double> norms(rows, 0.0);
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xv[r * d + j] * xv[r * d + j];
    norms[r] = std::sqrt(s);
    if (norms[r] >= eps)
      for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / norms[r];
  }
  return detail::make_result(x.shape(), std::move(out), {x},
                             [rows, d, eps, norms = std::move(norms)](Node& self) {
                               double* gx = detail::grad_of(self, 0);
                               if (!gx) return;
                               const auto& y = self.value;
                               const auto& g = self.grad;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 if (norms[r] < eps) continue;
                                 double yg = 0.0;
                                 for (std::size_t j = 0; j < d; ++j) yg += y[r * d + j] * g[r * d + j];
                                 for (std::size_t j = 0; j < d; ++j)
                                   gx[r * d + j] += (g[r * d + j] - y[r * d + j] * yg) / norms[r];
                               }
                             });
}

/// Forward values unchanged; no gradient reaches `x`.
inline Tensor detach(const Tensor& x) { return Tensor::constant(x.shape(), x.values()); }

// ---------------------------------------------------------------------------
// Pooling and reductions.

/// Per-dimension max over the rows of x[S×d]. Ties go to the first row.
inline Tensor maxpool_set(const Tensor& rows) {
  if (rows.rank() != 2) throw DimensionError("maxpool_set: expected [S×d], got " + to_string(rows.shape()));
  if (rows.dim(0) == 0) throw EmptySetError("maxpool_set: empty set");
  const std::size_t s = rows.dim(0), d = rows.dim(1);
  const auto& v = rows.values();
  std::vector<double> out(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(d));
  std::vector<std::size_t> arg(d, 0);
  for (std::size_t r = 1; r < s; ++r)
    for (std::size_t j = 0; j < d; ++j)
      if (v[r * d + j] > out[j]) {
        out[j] = v[r * d + j];
        arg[j] = r;
      }
  return detail::make_result({d}, std::move(out), {rows}, [arg = std::move(arg), d](Node& self) {
    if (double* gx = detail::grad_of(self, 0)) {
      for (std::size_t j = 0; j < d; ++j) gx[arg[j] * d + j] += self.grad[j];
    }
  });
}

/// Max-pool of rows x[E×d] grouped by `segment` into [S×d]. Segments with
/// no rows are zero and receive no gradient. Ties go to the first row.
inline Tensor segment_max(const Tensor& x, const std::vector<std::size_t>& segment,
                          std::size_t num_segments) {
  if (x.rank() != 2 || segment.size() != x.dim(0)) {
    throw DimensionError("segment_max: " + std::to_string(segment.size()) +
                         " segment ids for rows " + to_string(x.shape()));
  }
  const std::size_t d = x.dim(1);
  constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  std::vector<std::size_t> arg(num_segments * d, kNone);
  std::vector<double> out(num_segments * d, 0.0);
  const auto& v = x.values();
  for (std::size_t e = 0; e < segment.size(); ++e) {
    const std::size_t s = segment[e];
    if (s >= num_segments) throw DimensionError("segment_max: segment id out of range");
    for (std::size_t j = 0; j < d; ++j) {
      std::size_t& a = arg[s * d + j];
      if (a == kNone || v[e * d + j] > out[s * d + j]) {
        a = e;
        out[s * d + j] = v[e * d + j];
      }
    }
  }
  return detail::make_result({num_segments, d}, std::move(out), {x}, [arg = std::move(arg), d](Node& self) {
    double* gx = detail::grad_of(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < arg.size(); ++i) {
      if (arg[i] != kNone) gx[arg[i] * d + i % d] += self.grad[i];
    }
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return detail::make_result({}, {s}, {x}, [](Node& self) {
    if (double* gx = detail::grad_of(self, 0)) {
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
    }
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mse: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const Tensor diff = sub(a, b);
  return mean(mul(diff, diff));
}

}  // namespace fqa
