// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over dense double tensors.
//
// Values are computed eagerly as operations are recorded. Each node keeps
// its parents and a closure that scatters the node's gradient into them;
// `Tape::backward` walks nodes in reverse recording order, which is a valid
// reverse topological order because parents are always recorded first.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "confpo/error.hpp"
#include "confpo/tensor.hpp"

namespace confpo::ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  std::size_t id() const noexcept { return id_; }
  Tape& tape() const;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using Gradients = std::map<std::string, Tensor>;

class Tape {
 public:
  /// Scatters `out_grad` (gradient of the node) into the parents' slots.
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  /// Disables closure recording; values only. Backward is then unavailable.
  void set_grad_enabled(bool enabled) noexcept { grad_enabled_ = enabled; }
  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var variable(std::string name, Tensor value) {
    const Var v = push(std::move(value), grad_enabled_, {});
    leaves_.emplace_back(std::move(name), v.id());
    return v;
  }

  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  /// Records an operation result. Used by the primitive ops below.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    bool needs = false;
    if (grad_enabled_) {
      for (const Var& p : parents) needs = needs || nodes_[p.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  Var record(Tensor value, const std::vector<Var>& parents, BackwardFn fn) {
    bool needs = false;
    if (grad_enabled_) {
      for (const Var& p : parents) needs = needs || nodes_[p.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(const Var& v) const { return nodes_.at(v.id()).requires_grad; }

  /// Gradient slot of a node, zero-initialised on first touch.
  Tensor& grad_slot(const Var& v) {
    Node& n = nodes_[v.id()];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  /// Runs reverse accumulation from `out` seeded with `seed` (same shape).
  void backward(const Var& out, const Tensor& seed) {
    if (out.tape_ != this) throw UsageError("backward: variable belongs to another tape");
    if (!grad_enabled_) throw UsageError("backward: tape recorded without gradients");
    if (seed.shape() != out.value().shape()) {
      throw ShapeError("backward: seed shape " + shape_str(seed.shape()) +
                       " does not match output " + shape_str(out.value().shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor{};
    nodes_[out.id()].grad = seed;
    for (std::size_t i = out.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
    ran_backward_ = true;
  }

  void backward(const Var& out, double seed = 1.0) {
    if (out.valid() && out.value().size() != 1) {
      throw UsageError("backward: scalar seed needs a scalar output, got " +
                       shape_str(out.value().shape()));
    }
    backward(out, Tensor(out.value().shape(), seed));
  }

  /// Gradient of the last backward pass w.r.t. `v`; zeros when unreached.
  Tensor grad(const Var& v) const {
    if (!ran_backward_) throw UsageError("grad: backward has not been run");
    const Node& n = nodes_.at(v.id());
    return n.grad.empty() ? Tensor(n.value.shape(), 0.0) : n.grad;
  }

  /// Read-only view of a leaf gradient without copying; nullptr when unreached.
  const Tensor* grad_if_any(const Var& v) const {
    const Node& n = nodes_.at(v.id());
    return n.grad.empty() ? nullptr : &n.grad;
  }

  /// Named gradients of every leaf variable.
  Gradients gradients() const {
    Gradients out;
    for (const auto& [name, id] : leaves_) out.emplace(name, grad(Var(const_cast<Tape*>(this), id)));
    return out;
  }

  std::vector<std::pair<std::string, Var>> leaves() {
    std::vector<std::pair<std::string, Var>> out;
    out.reserve(leaves_.size());
    for (const auto& [name, id] : leaves_) out.emplace_back(name, Var(this, id));
    return out;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, std::move(fn)});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, std::size_t>> leaves_;
  bool grad_enabled_ = true;
  bool ran_backward_ = false;
};

inline Tape& Var::tape() const {
  if (!tape_) throw UsageError("variable is not attached to a tape");
  return *tape_;
}

inline const Tensor& Var::value() const { return tape().value(id_); }

namespace detail {

inline void require_same_tape(const char* op, const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw UsageError(std::string(op) + ": operands live on different tapes");
}

inline void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) + " does not match " +
                     shape_str(b.shape()));
  }
}

inline void require_rank(const char* op, const Var& a, std::size_t rank) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

template <typename Fwd, typename Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  Tape& t = a.tape();
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return t.record(std::move(out), {a}, [a, deriv](Tape& tape, const Tensor& g) {
    const Tensor& x = a.value();
    Tensor& ga = tape.grad_slot(a);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * deriv(x[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Var add(const Var& a, const Var& b) {
  detail::require_same_tape("add", a, b);
  detail::require_same_shape("add", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    for (const Var& p : {a, b}) {
      if (!t.requires_grad(p)) continue;
      Tensor& gp = t.grad_slot(p);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_tape("sub", a, b);
  detail::require_same_shape("sub", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_slot(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_slot(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_tape("mul", a, b);
  detail::require_same_shape("mul", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_slot(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_slot(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double) { return s; });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var exp(const Var& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

inline Var log(const Var& a) {
  for (double v : a.value().values()) {
    if (!(v > 0.0)) throw ValidationError("log: non-positive input " + std::to_string(v));
  }
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

inline Var square(const Var& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

inline Var tanh(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double th = std::tanh(x);
        return 1.0 - th * th;
      });
}

/// Tanh approximation of GELU.
inline Var gelu(const Var& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  return detail::unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x))); },
      [](double x) {
        const double th = std::tanh(k * (x + c * x * x * x));
        return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * k * (1.0 + 3.0 * c * x * x);
      });
}

// ----------------------------------------------------------------- reductions

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_slot(a);
    const double gv = g[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gv;
  });
}

inline Var mean(const Var& a) {
  if (a.value().empty()) throw ShapeError("mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

// ---------------------------------------------------------------- linear algebra

namespace detail {

/// out[m x n] += a[m x k] * b[k x n], row-major. Each output element is
/// accumulated in increasing p, so results do not depend on vectorisation.
inline void gemm_acc(const double* __restrict a, const double* __restrict b, double* __restrict out, std::size_t m,
                     std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict orow = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
}

/// out[k x n] += a[m x k]^T * b[m x n], row-major.
inline void gemm_tn_acc(const double* __restrict a, const double* __restrict b, double* __restrict out, std::size_t m,
                        std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* __restrict brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      double* __restrict orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
}

inline std::vector<double> transpose(const double* src, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = src[r * cols + c];
  }
  return t;
}

}  // namespace detail

/// [m x k] * [k x n] -> [m x n].
inline Var matmul(const Var& a, const Var& b) {
  detail::require_same_tape("matmul", a, b);
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  if (bv.shape()[0] != k) {
    throw ShapeError("matmul: shape " + shape_str(av.shape()) + " incompatible with " +
                     shape_str(bv.shape()));
  }
  Tensor out(Shape{m, n});
  detail::gemm_acc(av.values().data(), bv.values().data(), out.storage().data(), m, k, n);
  return a.tape().record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (t.requires_grad(a)) {
      // g [m x n] * b^T [n x k]
      const std::vector<double> bt = detail::transpose(bv.values().data(), k, n);
      detail::gemm_acc(g.values().data(), bt.data(), t.grad_slot(a).storage().data(), m, n, k);
    }
    if (t.requires_grad(b)) {
      // a^T [k x m] * g [m x n]
      detail::gemm_tn_acc(av.values().data(), g.values().data(), t.grad_slot(b).storage().data(), m, k, n);
    }
  });
}

/// [m x k] * [n x k]^T -> [m x n].
inline Var matmul_nt(const Var& a, const Var& b) {
  detail::require_same_tape("matmul_nt", a, b);
  detail::require_rank("matmul_nt", a, 2);
  detail::require_rank("matmul_nt", b, 2);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[0];
  if (bv.shape()[1] != k) {
    throw ShapeError("matmul_nt: shape " + shape_str(av.shape()) + " incompatible with transposed " +
                     shape_str(bv.shape()));
  }
  Tensor out(Shape{m, n});
  const std::vector<double> bt = detail::transpose(bv.values().data(), n, k);
  detail::gemm_acc(av.values().data(), bt.data(), out.storage().data(), m, k, n);
  return a.tape().record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (t.requires_grad(a)) {
      // g [m x n] * b [n x k]
      detail::gemm_acc(g.values().data(), bv.values().data(), t.grad_slot(a).storage().data(), m, n, k);
    }
    if (t.requires_grad(b)) {
      // g^T [n x m] * a [m x k]
      detail::gemm_tn_acc(g.values().data(), av.values().data(), t.grad_slot(b).storage().data(), m, n, k);
    }
  });
}

// ----------------------------------------------------------- indexing / layout

/// Rows of `table` [V x d] selected by `ids` -> [len(ids) x d].
inline Var gather_rows(const Var& table, std::vector<std::size_t> ids) {
  detail::require_rank("gather_rows", table, 2);
  const Tensor& tv = table.value();
  const std::size_t rows = tv.shape()[0], d = tv.shape()[1];
  Tensor out(Shape{ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= rows) {
      throw ShapeError("gather_rows: index " + std::to_string(ids[r]) + " out of range for " +
                       shape_str(tv.shape()));
    }
    std::copy_n(&tv[ids[r] * d], d, &out[r * d]);
  }
  return table.tape().record(std::move(out), {table}, [table, ids = std::move(ids), d](Tape& t, const Tensor& g) {
    Tensor& gt = t.grad_slot(table);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      double* dst = &gt[ids[r] * d];
      const double* src = &g[r * d];
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

/// Rows [begin, end) of a matrix.
inline Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  detail::require_rank("slice_rows", a, 2);
  const Tensor& av = a.value();
  const std::size_t d = av.shape()[1];
  if (begin > end || end > av.shape()[0]) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of bounds for " + shape_str(av.shape()));
  }
  Tensor out(Shape{end - begin, d});
  std::copy(av.values().begin() + static_cast<std::ptrdiff_t>(begin * d),
            av.values().begin() + static_cast<std::ptrdiff_t>(end * d), out.values().begin());
  return a.tape().record(std::move(out), {a}, [a, begin, d](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_slot(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[begin * d + i] += g[i];
  });
}

/// Columns [begin, end) of a matrix.
inline Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  detail::require_rank("slice_cols", a, 2);
  const Tensor& av = a.value();
  const std::size_t rows = av.shape()[0], cols = av.shape()[1];
  if (begin > end || end > cols) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of bounds for " + shape_str(av.shape()));
  }
  const std::size_t w = end - begin;
  Tensor out(Shape{rows, w});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(&av[r * cols + begin], w, &out[r * w]);
  return a.tape().record(std::move(out), {a}, [a, begin, w, rows, cols](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_slot(a);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < w; ++j) ga[r * cols + begin + j] += g[r * w + j];
    }
  });
}

/// Concatenates matrices with equal row counts along columns.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts.front().value().shape().at(0);
  std::size_t cols = 0;
  for (const Var& p : parts) {
    detail::require_rank("concat_cols", p, 2);
    detail::require_same_tape("concat_cols", parts.front(), p);
    if (p.value().shape()[0] != rows) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()) + " vs " +
                       shape_str(parts.front().shape()));
    }
    cols += p.value().shape()[1];
  }
  Tensor out(Shape{rows, cols});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    const std::size_t w = pv.shape()[1];
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(&pv[r * w], w, &out[r * cols + offset]);
    offset += w;
  }
  return parts.front().tape().record(std::move(out), parts, [parts, rows, cols](Tape& t, const Tensor& g) {
    std::size_t offset = 0;
    for (const Var& p : parts) {
      const std::size_t w = p.value().shape()[1];
      if (t.requires_grad(p)) {
        Tensor& gp = t.grad_slot(p);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < w; ++j) gp[r * w + j] += g[r * cols + offset + j];
        }
      }
      offset += w;
    }
  });
}

/// Element (r, ids[r]) of each row of a matrix -> vector of length rows.
inline Var pick(const Var& a, std::vector<std::size_t> ids) {
  detail::require_rank("pick", a, 2);
  const Tensor& av = a.value();
  const std::size_t rows = av.shape()[0], cols = av.shape()[1];
  if (ids.size() != rows) {
    throw ShapeError("pick: " + std::to_string(ids.size()) + " indices for " + shape_str(av.shape()));
  }
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if (ids[r] >= cols) {
      throw ShapeError("pick: index " + std::to_string(ids[r]) + " out of range for " +
                       shape_str(av.shape()));
    }
    out[r] = av[r * cols + ids[r]];
  }
  return a.tape().record(std::move(out), {a}, [a, ids = std::move(ids), cols](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_slot(a);
    for (std::size_t r = 0; r < ids.size(); ++r) ga[r * cols + ids[r]] += g[r];
  });
}

// ------------------------------------------------------------ neural primitives

/// Row-wise RMS normalisation with a learned per-column gain.
inline Var rms_norm(const Var& x, const Var& gain, double eps = 1e-5) {
  detail::require_rank("rms_norm", x, 2);
  detail::require_rank("rms_norm", gain, 1);
  detail::require_same_tape("rms_norm", x, gain);
  const Tensor& xv = x.value();
  const Tensor& gv = gain.value();
  const std::size_t rows = xv.shape()[0], d = xv.shape()[1];
  if (gv.size() != d) {
    throw ShapeError("rms_norm: gain " + shape_str(gv.shape()) + " does not match " + shape_str(xv.shape()));
  }
  Tensor out(Shape{rows, d});
  std::vector<double> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += xv[r * d + j] * xv[r * d + j];
    inv_rms[r] = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = gv[j] * xv[r * d + j] * inv_rms[r];
  }
  return x.tape().record(std::move(out), {x, gain},
                         [x, gain, inv_rms = std::move(inv_rms), rows, d](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    const Tensor& gv = gain.value();
    if (t.requires_grad(x)) {
      Tensor& gx = t.grad_slot(x);
      for (std::size_t r = 0; r < rows; ++r) {
        const double ir = inv_rms[r];
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * gv[j] * xv[r * d + j];
        const double k = dot * ir * ir * ir / static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          gx[r * d + j] += g[r * d + j] * gv[j] * ir - xv[r * d + j] * k;
        }
      }
    }
    if (t.requires_grad(gain)) {
      Tensor& gg = t.grad_slot(gain);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xv[r * d + j] * inv_rms[r];
      }
    }
  });
}

/// Row-wise log-softmax with max subtraction.
inline Var log_softmax_rows(const Var& a) {
  if (a.value().rank() == 1) {
    throw ShapeError("log_softmax_rows: expected a matrix, got " + shape_str(a.shape()) +
                     " (reshape vectors to [1xN])");
  }
  detail::require_rank("log_softmax_rows", a, 2);
  const Tensor& av = a.value();
  const std::size_t rows = av.shape()[0], cols = av.shape()[1];
  Tensor out(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = &av[r * cols];
    const double mx = *std::max_element(x, x + cols);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += std::exp(x[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = x[j] - lse;
  }
  const std::size_t out_id = a.tape().size();
  return a.tape().record(std::move(out), {a}, [a, out_id, rows, cols](Tape& t, const Tensor& g) {
    const Tensor& y = t.value(out_id);
    Tensor& ga = t.grad_slot(a);
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t j = 0; j < cols; ++j) gs += g[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) {
        ga[r * cols + j] += g[r * cols + j] - std::exp(y[r * cols + j]) * gs;
      }
    }
  });
}

/// Softmax over the causal prefix of each row of a square score matrix,
/// after multiplying scores by `scale`. Entries above the diagonal are 0.
inline Var causal_softmax_rows(const Var& a, double scale) {
  detail::require_rank("causal_softmax_rows", a, 2);
  const Tensor& av = a.value();
  const std::size_t n = av.shape()[0];
  if (av.shape()[1] != n) throw ShapeError("causal_softmax_rows: expected square, got " + shape_str(av.shape()));
  Tensor out(Shape{n, n});
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j <= r; ++j) mx = std::max(mx, scale * av[r * n + j]);
    double s = 0.0;
    for (std::size_t j = 0; j <= r; ++j) {
      const double e = std::exp(scale * av[r * n + j] - mx);
      out[r * n + j] = e;
      s += e;
    }
    for (std::size_t j = 0; j <= r; ++j) out[r * n + j] /= s;
  }
  const std::size_t out_id = a.tape().size();
  return a.tape().record(std::move(out), {a}, [a, out_id, n, scale](Tape& t, const Tensor& g) {
    const Tensor& p = t.value(out_id);
    Tensor& ga = t.grad_slot(a);
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j <= r; ++j) dot += p[r * n + j] * g[r * n + j];
      for (std::size_t j = 0; j <= r; ++j) ga[r * n + j] += scale * p[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

// ---------------------------------------------------------------------- graph

/// Declared input of a `Graph`.
struct InputDecl {
  std::string name;
  Shape shape;
};

/// A re-runnable computation: named, shape-checked inputs feed a builder
/// that records onto a fresh tape on every `forward`.
class Graph {
 public:
  using Inputs = std::map<std::string, Tensor>;
  using Builder = std::function<Var(Tape&, const std::map<std::string, Var>&)>;

  Graph(std::vector<InputDecl> decls, Builder builder)
      : decls_(std::move(decls)), builder_(std::move(builder)) {}

  /// Evaluates the graph; intermediate values stay cached for backward.
  Tensor forward(const Inputs& inputs) {
    for (const InputDecl& d : decls_) {
      const auto it = inputs.find(d.name);
      if (it == inputs.end()) throw ValidationError("forward: missing input '" + d.name + "'");
      if (it->second.shape() != d.shape) {
        throw ShapeError("forward: input '" + d.name + "' has shape " + shape_str(it->second.shape()) +
                         ", declared " + shape_str(d.shape));
      }
    }
    if (inputs.size() != decls_.size()) throw ValidationError("forward: undeclared inputs supplied");
    tape_ = std::make_unique<Tape>();
    std::map<std::string, Var> vars;
    for (const InputDecl& d : decls_) vars.emplace(d.name, tape_->variable(d.name, inputs.at(d.name)));
    output_ = builder_(*tape_, vars);
    return output_.value();
  }

  /// Gradients of the scalar output w.r.t. every input.
  Gradients backward(double output_seed = 1.0) {
    if (!tape_) throw UsageError("backward: forward has not been executed");
    tape_->backward(output_, output_seed);
    return tape_->gradients();
  }

 private:
  std::vector<InputDecl> decls_;
  Builder builder_;
  std::unique_ptr<Tape> tape_;
  Var output_;
};

}  // namespace confpo::ad
