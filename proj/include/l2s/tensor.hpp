// SPDX-License-Identifier: Apache-2.0
#ifndef L2S_TENSOR_HPP
#define L2S_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "l2s/common.hpp"

namespace l2s {

using Shape = std::vector<int64_t>;
using Vec = std::vector<double>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// ---------------------------------------------------------------------------
// Tape: records one forward pass for reverse-mode differentiation. Freed on
// backward. Confined to a single logical thread.
// ---------------------------------------------------------------------------

class Tape {
 public:
  struct Node {
    int64_t size = 0;
    std::function<void(const Vec&, Tape&)> backward;  // null for leaves
    std::shared_ptr<Vec> leaf_grad;                   // parameter grad target
  };

  Tape() : gen(next_gen()) {}

  static Tape*& current() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

  // Active tape, or nullptr when not recording.
  static Tape* active() {
    Tape* t = current();
    return (t && t->recording) ? t : nullptr;
  }

  int64_t add_node(int64_t size, std::function<void(const Vec&, Tape&)> fn) {
    nodes.push_back(Node{size, std::move(fn), nullptr});
    return static_cast<int64_t>(nodes.size()) - 1;
  }

  int64_t add_leaf(int64_t size, std::shared_ptr<Vec> grad_target) {
    nodes.push_back(Node{size, nullptr, std::move(grad_target)});
    return static_cast<int64_t>(nodes.size()) - 1;
  }

  // Gradient buffer for a node, zero-initialized on first touch.
  Vec& grad_of(int64_t id) {
    Vec& g = gbuf_[static_cast<size_t>(id)];
    if (g.empty()) g.assign(static_cast<size_t>(nodes[static_cast<size_t>(id)].size), 0.0);
    return g;
  }

  // Walks the tape in reverse from `loss_node`, accumulating into parameter
  // grad buffers. Clears the tape afterwards.
  void backprop(int64_t loss_node) {
    gbuf_.assign(nodes.size(), Vec{});
    grad_of(loss_node)[0] = 1.0;
    for (int64_t i = static_cast<int64_t>(nodes.size()) - 1; i >= 0; --i) {
      Vec& g = gbuf_[static_cast<size_t>(i)];
      if (g.empty()) continue;
      Node& nd = nodes[static_cast<size_t>(i)];
      if (nd.backward) nd.backward(g, *this);
      if (nd.leaf_grad) {
        Vec& dst = *nd.leaf_grad;
        for (size_t k = 0; k < dst.size(); ++k) dst[k] += g[k];
      }
      g = Vec{};
    }
    nodes.clear();
    gbuf_.clear();
  }

  bool recording = true;
  uint64_t gen;
  std::vector<Node> nodes;

 private:
  static uint64_t next_gen() {
    static std::atomic<uint64_t> g{1};
    return g.fetch_add(1);
  }
  std::vector<Vec> gbuf_;
};

// Establishes a recording tape for the current scope.
class TapeScope {
 public:
  TapeScope() : prev_(Tape::current()) { Tape::current() = &tape_; }
  ~TapeScope() { Tape::current() = prev_; }
  Tape& tape() { return tape_; }

 private:
  Tape tape_;
  Tape* prev_;
};

// Suspends recording for the current scope.
class NoGradScope {
 public:
  NoGradScope() : prev_(Tape::current()) { Tape::current() = nullptr; }
  ~NoGradScope() { Tape::current() = prev_; }

 private:
  Tape* prev_;
};

// ---------------------------------------------------------------------------
// Tensor: dense float64 array with optional tape participation. Data is
// immutable once written by an op; copies share storage.
// ---------------------------------------------------------------------------

class Tensor {
 public:
  Shape shape;
  std::shared_ptr<Vec> data;
  mutable std::shared_ptr<Vec> grad;
  bool requires_grad = false;
  mutable int64_t node = -1;
  mutable uint64_t tape_gen = 0;

  Tensor() = default;

  static Tensor zeros(Shape s) {
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<Vec>(static_cast<size_t>(shape_numel(t.shape)), 0.0);
    return t;
  }

  static Tensor full(Shape s, double v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.data->begin(), t.data->end(), v);
    return t;
  }

  static Tensor from(Shape s, Vec values) {
    Tensor t;
    t.shape = std::move(s);
    if (static_cast<int64_t>(values.size()) != shape_numel(t.shape))
      throw ShapeMismatch("from: " + std::to_string(values.size()) + " values for shape " +
                          shape_str(t.shape));
    t.data = std::make_shared<Vec>(std::move(values));
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  int64_t numel() const { return shape_numel(shape); }
  int64_t ndim() const { return static_cast<int64_t>(shape.size()); }

  int64_t dim(int64_t i) const {
    if (i < 0) i += ndim();
    return shape[static_cast<size_t>(i)];
  }

  double* ptr() { return data->data(); }
  const double* ptr() const { return data->data(); }

  double item() const {
    if (numel() != 1) throw ShapeMismatch("item() on non-scalar " + shape_str(shape));
    return (*data)[0];
  }

  // Ensures a zeroed grad buffer exists (parameters only).
  Vec& ensure_grad() const {
    if (!grad) grad = std::make_shared<Vec>(static_cast<size_t>(numel()), 0.0);
    return *grad;
  }

  void zero_grad() const {
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
  }
};

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape)
    throw ShapeMismatch(std::string(op) + ": " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

#ifndef NDEBUG
inline void check_finite(const Tensor& t, const char* op) {
  for (double v : *t.data)
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
}
#else
inline void check_finite(const Tensor&, const char*) {}
#endif

// Registers `t` on the tape, creating a leaf node for parameters. Returns the
// node id or -1 when the value is a constant for this tape.
inline int64_t track(Tape* tp, const Tensor& t) {
  if (!tp) return -1;
  if (t.tape_gen == tp->gen && t.node >= 0) return t.node;
  if (t.requires_grad) {
    t.ensure_grad();
    t.node = tp->add_leaf(t.numel(), t.grad);
    t.tape_gen = tp->gen;
    return t.node;
  }
  return -1;
}

inline void record(Tape* tp, const Tensor& out, std::function<void(const Vec&, Tape&)> fn) {
  out.node = tp->add_node(out.numel(), std::move(fn));
  out.tape_gen = tp->gen;
}

// y[i] += alpha * x[i]
inline void axpy(Vec& y, const double* x, size_t n, double alpha = 1.0) {
  for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tape* tp = Tape::active();
  int64_t pa = detail::track(tp, a), pb = detail::track(tp, b);
  Tensor out = Tensor::zeros(a.shape);
  const double* pa_ = a.ptr();
  const double* pb_ = b.ptr();
  double* po = out.ptr();
  int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa_[i] + pb_[i];
  if (tp && (pa >= 0 || pb >= 0)) {
    detail::record(tp, out, [pa, pb](const Vec& g, Tape& t) {
      if (pa >= 0) detail::axpy(t.grad_of(pa), g.data(), g.size());
      if (pb >= 0) detail::axpy(t.grad_of(pb), g.data(), g.size());
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  Tape* tp = Tape::active();
  int64_t pa = detail::track(tp, a), pb = detail::track(tp, b);
  Tensor out = Tensor::zeros(a.shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.ptr()[i] = a.ptr()[i] - b.ptr()[i];
  if (tp && (pa >= 0 || pb >= 0)) {
    detail::record(tp, out, [pa, pb](const Vec& g, Tape& t) {
      if (pa >= 0) detail::axpy(t.grad_of(pa), g.data(), g.size());
      if (pb >= 0) detail::axpy(t.grad_of(pb), g.data(), g.size(), -1.0);
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  Tape* tp = Tape::active();
  int64_t pa = detail::track(tp, a), pb = detail::track(tp, b);
  Tensor out = Tensor::zeros(a.shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.ptr()[i] = a.ptr()[i] * b.ptr()[i];
  if (tp && (pa >= 0 || pb >= 0)) {
    auto da = a.data, db = b.data;
    detail::record(tp, out, [pa, pb, da, db](const Vec& g, Tape& t) {
      if (pa >= 0) {
        Vec& ga = t.grad_of(pa);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*db)[i];
      }
      if (pb >= 0) {
        Vec& gb = t.grad_of(pb);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*da)[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tape* tp = Tape::active();
  int64_t pa = detail::track(tp, a);
  Tensor out = Tensor::zeros(a.shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.ptr()[i] = a.ptr()[i] * c;
  if (tp && pa >= 0) {
    detail::record(tp, out, [pa, c](const Vec& g, Tape& t) {
      detail::axpy(t.grad_of(pa), g.data(), g.size(), c);
    });
  }
  return out;
}

inline Tensor add_scalar(const Tensor& a, double c) {
  Tape* tp = Tape::active();
  int64_t pa = detail::track(tp, a);
  Tensor out = Tensor::zeros(a.shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.ptr()[i] = a.ptr()[i] + c;
  if (tp && pa >= 0) {
    detail::record(tp, out, [pa](const Vec& g, Tape& t) {
      detail::axpy(t.grad_of(pa), g.data(), g.size());
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products. `a` is [*, m, k]; `b` is either [k, n] (shared weights) or
// [*, k, n] with identical leading dims. Leading dims broadcast as a flat
// batch. This is the only broadcasting matmul supports.
// ---------------------------------------------------------------------------

namespace detail {

struct MatDims {
  int64_t batch, m, k, n;
  bool b_batched;
};

inline MatDims matmul_dims(const Tensor& a, const Tensor& b, bool b_transposed) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw ShapeMismatch("matmul: need >=2 dims, got " + shape_str(a.shape) + " x " +
                        shape_str(b.shape));
  int64_t m = a.dim(-2), k = a.dim(-1);
  int64_t bk = b_transposed ? b.dim(-1) : b.dim(-2);
  int64_t bn = b_transposed ? b.dim(-2) : b.dim(-1);
  if (k != bk)
    throw ShapeMismatch("matmul: inner dims disagree " + shape_str(a.shape) + " x " +
                        shape_str(b.shape));
  int64_t batch = 1;
  for (int64_t i = 0; i + 2 < a.ndim(); ++i) batch *= a.dim(i);
  bool b_batched = b.ndim() > 2;
  if (b_batched) {
    int64_t bb = 1;
    for (int64_t i = 0; i + 2 < b.ndim(); ++i) bb *= b.dim(i);
    if (bb != batch)
      throw ShapeMismatch("matmul: batch dims disagree " + shape_str(a.shape) + " x " +
                          shape_str(b.shape));
  }
  return {batch, m, k, bn, b_batched};
}

// c[bm, n] += a[bm, k] @ b[k or bk, n], rows of the flattened output in
// parallel; each output row's reduction order is fixed, so the result is
// bitwise independent of the thread count.
inline void gemm_nn(const double* a, const double* b, double* c, MatDims d) {
  int64_t rows = d.batch * d.m;
  parallel_rows(rows, [&](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      int64_t bi = r / d.m;
      const double* arow = a + r * d.k;
      const double* bmat = b + (d.b_batched ? bi * d.k * d.n : 0);
      double* crow = c + r * d.n;
      for (int64_t j = 0; j < d.n; ++j) crow[j] = 0.0;
      for (int64_t kk = 0; kk < d.k; ++kk) {
        double av = arow[kk];
        const double* brow = bmat + kk * d.n;
        for (int64_t j = 0; j < d.n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

// Dot product with eight independent accumulators; fixed reassociation keeps
// it deterministic while still vectorizing.
inline double dot8(const double* x, const double* y, int64_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int64_t l = 0; l < 8; ++l) acc[l] += x[i + l] * y[i + l];
  double tail = 0.0;
  for (; i < n; ++i) tail += x[i] * y[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

// c[bm, n] = a[bm, k] @ b[b?, n, k]^T
inline void gemm_nt(const double* a, const double* b, double* c, MatDims d) {
  int64_t rows = d.batch * d.m;
  parallel_rows(rows, [&](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      int64_t bi = r / d.m;
      const double* arow = a + r * d.k;
      const double* bmat = b + (d.b_batched ? bi * d.n * d.k : 0);
      double* crow = c + r * d.n;
      for (int64_t j = 0; j < d.n; ++j) crow[j] = dot8(arow, bmat + j * d.k, d.k);
    }
  });
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::MatDims d = detail::matmul_dims(a, b, false);
  Tape* tp = Tape::active();
  int64_t pa = detail::track(tp, a), pb = detail::track(tp, b);
  Shape os(a.shape.begin(), a.shape.end() - 1);
  os.push_back(d.n);
  Tensor out = Tensor::zeros(os);
  detail::gemm_nn(a.ptr(), b.ptr(), out.ptr(), d);
  detail::check_finite(out, "matmul");
  if (tp && (pa >= 0 || pb >= 0)) {
    auto da = a.data, db = b.data;
    detail::record(tp, out, [pa, pb, da, db, d](const Vec& g, Tape& t) {
      if (pa >= 0) {
        // da = g @ b^T
        Vec& ga = t.grad_of(pa);
        detail::MatDims dd{d.batch, d.m, d.n, d.k, d.b_batched};
        Vec tmp(ga.size());
        detail::gemm_nt(g.data(), db->data(), tmp.data(), dd);
        detail::axpy(ga, tmp.data(), tmp.size());
      }
      if (pb >= 0) {
        // db = a^T @ g (summed over batch when b is shared)
        Vec& gb = t.grad_of(pb);
        const double* ap = da->data();
        const double* gp = g.data();
        if (d.b_batched) {
          parallel_rows(d.batch, [&](int64_t b0, int64_t b1) {
            for (int64_t bi = b0; bi < b1; ++bi)
              for (int64_t kk = 0; kk < d.k; ++kk) {
                double* grow = gb.data() + (bi * d.k + kk) * d.n;
                for (int64_t i = 0; i < d.m; ++i) {
                  double av = ap[(bi * d.m + i) * d.k + kk];
                  const double* gr = gp + (bi * d.m + i) * d.n;
                  for (int64_t j = 0; j < d.n; ++j) grow[j] += av * gr[j];
                }
              }
          });
        } else {
          parallel_rows(d.k, [&](int64_t k0, int64_t k1) {
            for (int64_t kk = k0; kk < k1; ++kk) {
              double* grow = gb.data() + kk * d.n;
              for (int64_t r = 0; r < d.batch * d.m; ++r) {
                double av = ap[r * d.k + kk];
                const double* gr = gp + r * d.n;
                for (int64_t j = 0; j < d.n; ++j) grow[j] += av * gr[j];
              }
            }
          });
        }
      }
    });
  }
  return out;
}

// a [*, m, k] @ b [*, n, k]^T -> [*, m, n]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::MatDims d = detail::matmul_dims(a, b, true);
  Tape* tp = Tape::active();
  int64_t pa = detail::track(tp, a), pb = detail::track(tp, b);
  Shape os(a.shape.begin(), a.shape.end() - 1);
  os.push_back(d.n);
  Tensor out = Tensor::zeros(os);
  detail::gemm_nt(a.ptr(), b.ptr(), out.ptr(), d);
  detail::check_finite(out, "matmul_nt");
  if (tp && (pa >= 0 || pb >= 0)) {
    auto da = a.data, db = b.data;
    detail::record(tp, out, [pa, pb, da, db, d](const Vec& g, Tape& t) {
      if (pa >= 0) {
        // da = g @ b
        Vec& ga = t.grad_of(pa);
        detail::MatDims dd{d.batch, d.m, d.n, d.k, d.b_batched};
        Vec tmp(ga.size());
        detail::gemm_nn(g.data(), db->data(), tmp.data(), dd);
        detail::axpy(ga, tmp.data(), tmp.size());
      }
      if (pb >= 0) {
        // db[j, k] = sum_i g[i, j] * a[i, k]
        Vec& gb = t.grad_of(pb);
        const double* ap = da->data();
        const double* gp = g.data();
        int64_t nb = d.b_batched ? d.batch : 1;
        parallel_rows(nb * d.n, [&](int64_t r0, int64_t r1) {
          for (int64_t r = r0; r < r1; ++r) {
            int64_t bi = r / d.n, j = r % d.n;
            double* grow = gb.data() + (bi * d.n + j) * d.k;
            int64_t bb0 = d.b_batched ? bi : 0;
            int64_t bb1 = d.b_batched ? bi + 1 : d.batch;
            for (int64_t bq = bb0; bq < bb1; ++bq)
              for (int64_t i = 0; i < d.m; ++i) {
                double gv = gp[(bq * d.m + i) * d.n + j];
                const double* ar = ap + (bq * d.m + i) * d.k;
                for (int64_t kk = 0; kk < d.k; ++kk) grow[kk] += gv * ar[kk];
              }
          }
        });
      }
    });
  }
  return out;
}

// x [..., d] + v [d]
inline Tensor add_bias(const Tensor& x, const Tensor& v) {
  int64_t dlast = x.dim(-1);
  if (v.ndim() != 1 || v.dim(0) != dlast)
    throw ShapeMismatch("add_bias: " + shape_str(x.shape) + " + " + shape_str(v.shape));
  Tape* tp = Tape::active();
  int64_t px = detail::track(tp, x), pv = detail::track(tp, v);
  Tensor out = Tensor::zeros(x.shape);
  int64_t rows = x.numel() / dlast;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < dlast; ++j)
      out.ptr()[r * dlast + j] = x.ptr()[r * dlast + j] + v.ptr()[j];
  if (tp && (px >= 0 || pv >= 0)) {
    detail::record(tp, out, [px, pv, rows, dlast](const Vec& g, Tape& t) {
      if (px >= 0) detail::axpy(t.grad_of(px), g.data(), g.size());
      if (pv >= 0) {
        Vec& gv = t.grad_of(pv);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < dlast; ++j) gv[j] += g[r * dlast + j];
      }
    });
  }
  return out;
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Softmax with an additive attention bias.
// ---------------------------------------------------------------------------

// Read-only bias over softmax logits. `data` covers `batches` matrices of
// `rows` x `cols` (rows == 1 broadcasts down columns); consecutive groups of
// `head_repeat` logit batches share one bias batch.
struct BiasView {
  std::shared_ptr<const Vec> data;
  int64_t batches = 0;
  int64_t rows = 0;
  int64_t cols = 0;
  int64_t head_repeat = 1;

  bool empty() const { return !data; }
  const double* row(int64_t logit_batch, int64_t r) const {
    int64_t bi = logit_batch / head_repeat;
    int64_t ri = rows == 1 ? 0 : r;
    return data->data() + (bi * rows + ri) * cols;
  }
};

// Softmax over the last dimension of (logits + bias), stabilized by
// max-subtraction. Throws AllMaskedRow when a row's bias forbids every entry;
// layout-produced biases guarantee this cannot happen.
inline Tensor softmax_with_bias(const Tensor& logits, const BiasView& bias) {
  int64_t cols = logits.dim(-1);
  int64_t rows = logits.numel() / cols;
  int64_t rows_per_batch = bias.empty() ? rows : logits.numel() / cols / std::max<int64_t>(1, bias.batches * bias.head_repeat);
  if (!bias.empty()) {
    if (bias.cols != cols)
      throw ShapeMismatch("softmax_with_bias: bias cols " + std::to_string(bias.cols) +
                          " vs logits " + std::to_string(cols));
    if (rows % (bias.batches * bias.head_repeat) != 0)
      throw ShapeMismatch("softmax_with_bias: bias batches do not divide logit rows");
    rows_per_batch = rows / (bias.batches * bias.head_repeat);
    if (bias.rows != 1 && bias.rows != rows_per_batch)
      throw ShapeMismatch("softmax_with_bias: bias rows mismatch");
  }
  Tape* tp = Tape::active();
  int64_t pl = detail::track(tp, logits);
  Tensor out = Tensor::zeros(logits.shape);
  const double* lp = logits.ptr();
  double* op = out.ptr();
  for (int64_t r = 0; r < rows; ++r) {
    const double* brow = nullptr;
    if (!bias.empty()) {
      int64_t lb = r / rows_per_batch;
      brow = bias.row(lb, r % rows_per_batch);
      double bmax = brow[0];
      for (int64_t j = 1; j < cols; ++j) bmax = std::max(bmax, brow[j]);
      if (bmax <= -0.5 * kNegLarge)
        throw AllMaskedRow("softmax_with_bias: row " + std::to_string(r) +
                           " has every position forbidden");
    }
    const double* lrow = lp + r * cols;
    double* orow = op + r * cols;
    double m = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < cols; ++j) {
      double v = lrow[j] + (brow ? brow[j] : 0.0);
      orow[j] = v;
      m = std::max(m, v);
    }
    double s = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      orow[j] = std::exp(orow[j] - m);
      s += orow[j];
    }
    double inv = 1.0 / s;
    for (int64_t j = 0; j < cols; ++j) orow[j] *= inv;
  }
  if (tp && pl >= 0) {
    auto dy = out.data;
    detail::record(tp, out, [pl, dy, rows, cols](const Vec& g, Tape& t) {
      Vec& gl = t.grad_of(pl);
      const double* yp = dy->data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* yrow = yp + r * cols;
        const double* grow = g.data() + r * cols;
        double dot = 0.0;
        for (int64_t j = 0; j < cols; ++j) dot += grow[j] * yrow[j];
        double* glrow = gl.data() + r * cols;
        for (int64_t j = 0; j < cols; ++j) glrow[j] += yrow[j] * (grow[j] - dot);
      }
    });
  }
  return out;
}

inline Tensor softmax(const Tensor& logits) { return softmax_with_bias(logits, BiasView{}); }

// ---------------------------------------------------------------------------
// Layer norm over the last dimension (no affine; modulation supplies it).
// ---------------------------------------------------------------------------

inline Tensor layer_norm(const Tensor& x, double eps = 1e-6) {
  int64_t d = x.dim(-1);
  if (d < 1) throw ShapeMismatch("layer_norm: empty last dim");
  if (eps <= 0) throw ValidationError("layer_norm: eps must be positive");
  int64_t rows = x.numel() / d;
  Tape* tp = Tape::active();
  int64_t px = detail::track(tp, x);
  Tensor out = Tensor::zeros(x.shape);
  auto inv_std = std::make_shared<Vec>(static_cast<size_t>(rows));
  const double* xp = x.ptr();
  double* op = out.ptr();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xp + r * d;
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      double c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = is;
    double* orow = op + r * d;
    for (int64_t j = 0; j < d; ++j) orow[j] = (xr[j] - mean) * is;
  }
  if (tp && px >= 0) {
    auto dy = out.data;
    detail::record(tp, out, [px, dy, inv_std, rows, d](const Vec& g, Tape& t) {
      Vec& gx = t.grad_of(px);
      const double* yp = dy->data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* yrow = yp + r * d;
        const double* grow = g.data() + r * d;
        double gmean = 0.0, gymean = 0.0;
        for (int64_t j = 0; j < d; ++j) {
          gmean += grow[j];
          gymean += grow[j] * yrow[j];
        }
        gmean /= static_cast<double>(d);
        gymean /= static_cast<double>(d);
        double is = (*inv_std)[static_cast<size_t>(r)];
        double* gxr = gx.data() + r * d;
        for (int64_t j = 0; j < d; ++j)
          gxr[j] += is * (grow[j] - gmean - yrow[j] * gymean);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline Tensor silu(const Tensor& x) {
  Tape* tp = Tape::active();
  int64_t px = detail::track(tp, x);
  Tensor out = Tensor::zeros(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) {
    double v = x.ptr()[i];
    out.ptr()[i] = v / (1.0 + std::exp(-v));
  }
  if (tp && px >= 0) {
    auto dx = x.data;
    detail::record(tp, out, [px, dx](const Vec& g, Tape& t) {
      Vec& gx = t.grad_of(px);
      for (size_t i = 0; i < g.size(); ++i) {
        double v = (*dx)[i];
        double s = 1.0 / (1.0 + std::exp(-v));
        gx[i] += g[i] * s * (1.0 + v * (1.0 - s));
      }
    });
  }
  return out;
}

inline Tensor gelu(const Tensor& x) {
  Tape* tp = Tape::active();
  int64_t px = detail::track(tp, x);
  Tensor out = Tensor::zeros(x.shape);
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (int64_t i = 0; i < x.numel(); ++i) {
    double v = x.ptr()[i];
    out.ptr()[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  if (tp && px >= 0) {
    auto dx = x.data;
    detail::record(tp, out, [px, dx](const Vec& g, Tape& t) {
      Vec& gx = t.grad_of(px);
      constexpr double is2 = 0.7071067811865475244;
      constexpr double inv_sqrt2pi = 0.3989422804014326779;
      for (size_t i = 0; i < g.size(); ++i) {
        double v = (*dx)[i];
        double cdf = 0.5 * (1.0 + std::erf(v * is2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
  Tape* tp = Tape::active();
  int64_t px = detail::track(tp, x);
  double s = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) s += x.ptr()[i];
  Tensor out = Tensor::scalar(s);
  if (tp && px >= 0) {
    detail::record(tp, out, [px](const Vec& g, Tape& t) {
      Vec& gx = t.grad_of(px);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
    });
  }
  return out;
}

inline Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

// mean((a - b)^2)
inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mse");
  Tape* tp = Tape::active();
  int64_t pa = detail::track(tp, a), pb = detail::track(tp, b);
  int64_t n = a.numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double dlt = a.ptr()[i] - b.ptr()[i];
    s += dlt * dlt;
  }
  Tensor out = Tensor::scalar(s / static_cast<double>(n));
  if (tp && (pa >= 0 || pb >= 0)) {
    auto da = a.data, db = b.data;
    detail::record(tp, out, [pa, pb, da, db, n](const Vec& g, Tape& t) {
      double c = 2.0 * g[0] / static_cast<double>(n);
      if (pa >= 0) {
        Vec& ga = t.grad_of(pa);
        for (int64_t i = 0; i < n; ++i) ga[i] += c * ((*da)[i] - (*db)[i]);
      }
      if (pb >= 0) {
        Vec& gb = t.grad_of(pb);
        for (int64_t i = 0; i < n; ++i) gb[i] -= c * ((*da)[i] - (*db)[i]);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

// Free: shares storage and tape node.
inline Tensor reshape(const Tensor& x, Shape s) {
  if (shape_numel(s) != x.numel())
    throw ShapeMismatch("reshape: " + shape_str(x.shape) + " -> " + shape_str(s));
  Tensor out = x;
  out.shape = std::move(s);
  return out;
}

// (B, L, D) -> (B*H, L, D/H)
inline Tensor split_heads(const Tensor& x, int64_t heads) {
  int64_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  if (D % heads != 0) throw ShapeMismatch("split_heads: d_model not divisible by heads");
  int64_t dk = D / heads;
  Tape* tp = Tape::active();
  int64_t px = detail::track(tp, x);
  Tensor out = Tensor::zeros({B * heads, L, dk});
  const double* xp = x.ptr();
  double* op = out.ptr();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t l = 0; l < L; ++l) {
        const double* src = xp + (b * L + l) * D + h * dk;
        double* dst = op + ((b * heads + h) * L + l) * dk;
        std::copy(src, src + dk, dst);
      }
  if (tp && px >= 0) {
    detail::record(tp, out, [px, B, L, D, heads, dk](const Vec& g, Tape& t) {
      Vec& gx = t.grad_of(px);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < heads; ++h)
          for (int64_t l = 0; l < L; ++l) {
            const double* src = g.data() + ((b * heads + h) * L + l) * dk;
            double* dst = gx.data() + (b * L + l) * D + h * dk;
            for (int64_t c = 0; c < dk; ++c) dst[c] += src[c];
          }
    });
  }
  return out;
}

// (B*H, L, dk) -> (B, L, H*dk)
inline Tensor merge_heads(const Tensor& x, int64_t heads) {
  int64_t BH = x.dim(0), L = x.dim(1), dk = x.dim(2);
  if (BH % heads != 0) throw ShapeMismatch("merge_heads: batch not divisible by heads");
  int64_t B = BH / heads, D = heads * dk;
  Tape* tp = Tape::active();
  int64_t px = detail::track(tp, x);
  Tensor out = Tensor::zeros({B, L, D});
  const double* xp = x.ptr();
  double* op = out.ptr();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t l = 0; l < L; ++l) {
        const double* src = xp + ((b * heads + h) * L + l) * dk;
        double* dst = op + (b * L + l) * D + h * dk;
        std::copy(src, src + dk, dst);
      }
  if (tp && px >= 0) {
    detail::record(tp, out, [px, B, L, D, heads, dk](const Vec& g, Tape& t) {
      Vec& gx = t.grad_of(px);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < heads; ++h)
          for (int64_t l = 0; l < L; ++l) {
            const double* src = g.data() + (b * L + l) * D + h * dk;
            double* dst = gx.data() + ((b * heads + h) * L + l) * dk;
            for (int64_t c = 0; c < dk; ++c) dst[c] += src[c];
          }
    });
  }
  return out;
}

// (B, rest...) -> (B*r, rest...), sample b expanded to slots b*r..b*r+r-1
inline Tensor repeat_batch(const Tensor& x, int64_t r) {
  int64_t B = x.dim(0);
  int64_t inner = x.numel() / B;
  Shape os = x.shape;
  os[0] = B * r;
  Tape* tp = Tape::active();
  int64_t px = detail::track(tp, x);
  Tensor out = Tensor::zeros(os);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t j = 0; j < r; ++j)
      std::copy(x.ptr() + b * inner, x.ptr() + (b + 1) * inner,
                out.ptr() + (b * r + j) * inner);
  if (tp && px >= 0) {
    detail::record(tp, out, [px, B, r, inner](const Vec& g, Tape& t) {
      Vec& gx = t.grad_of(px);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t j = 0; j < r; ++j) {
          const double* src = g.data() + (b * r + j) * inner;
          double* dst = gx.data() + b * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

// x (B, L, D) * s (B, D), s broadcast over tokens
inline Tensor scale_tokens(const Tensor& x, const Tensor& s) {
  int64_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  if (s.ndim() != 2 || s.dim(0) != B || s.dim(1) != D)
    throw ShapeMismatch("scale_tokens: " + shape_str(x.shape) + " * " + shape_str(s.shape));
  Tape* tp = Tape::active();
  int64_t px = detail::track(tp, x), ps = detail::track(tp, s);
  Tensor out = Tensor::zeros(x.shape);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t l = 0; l < L; ++l)
      for (int64_t dd = 0; dd < D; ++dd)
        out.ptr()[(b * L + l) * D + dd] = x.ptr()[(b * L + l) * D + dd] * s.ptr()[b * D + dd];
  if (tp && (px >= 0 || ps >= 0)) {
    auto dx = x.data, ds = s.data;
    detail::record(tp, out, [px, ps, dx, ds, B, L, D](const Vec& g, Tape& t) {
      if (px >= 0) {
        Vec& gx = t.grad_of(px);
        for (int64_t b = 0; b < B; ++b)
          for (int64_t l = 0; l < L; ++l)
            for (int64_t dd = 0; dd < D; ++dd)
              gx[(b * L + l) * D + dd] += g[(b * L + l) * D + dd] * (*ds)[b * D + dd];
      }
      if (ps >= 0) {
        Vec& gs = t.grad_of(ps);
        for (int64_t b = 0; b < B; ++b)
          for (int64_t l = 0; l < L; ++l)
            for (int64_t dd = 0; dd < D; ++dd)
              gs[b * D + dd] += g[(b * L + l) * D + dd] * (*dx)[(b * L + l) * D + dd];
      }
    });
  }
  return out;
}

// x (B, L, D) + s (B, D)
inline Tensor shift_tokens(const Tensor& x, const Tensor& s) {
  int64_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  if (s.ndim() != 2 || s.dim(0) != B || s.dim(1) != D)
    throw ShapeMismatch("shift_tokens: " + shape_str(x.shape) + " + " + shape_str(s.shape));
  Tape* tp = Tape::active();
  int64_t px = detail::track(tp, x), ps = detail::track(tp, s);
  Tensor out = Tensor::zeros(x.shape);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t l = 0; l < L; ++l)
      for (int64_t dd = 0; dd < D; ++dd)
        out.ptr()[(b * L + l) * D + dd] = x.ptr()[(b * L + l) * D + dd] + s.ptr()[b * D + dd];
  if (tp && (px >= 0 || ps >= 0)) {
    detail::record(tp, out, [px, ps, B, L, D](const Vec& g, Tape& t) {
      if (px >= 0) detail::axpy(t.grad_of(px), g.data(), g.size());
      if (ps >= 0) {
        Vec& gs = t.grad_of(ps);
        for (int64_t b = 0; b < B; ++b)
          for (int64_t l = 0; l < L; ++l)
            for (int64_t dd = 0; dd < D; ++dd) gs[b * D + dd] += g[(b * L + l) * D + dd];
      }
    });
  }
  return out;
}

// x (B, L, D) + p (L, D), p broadcast over batch
inline Tensor add_positional(const Tensor& x, const Tensor& p) {
  int64_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  if (p.ndim() != 2 || p.dim(0) != L || p.dim(1) != D)
    throw ShapeMismatch("add_positional: " + shape_str(x.shape) + " + " + shape_str(p.shape));
  Tape* tp = Tape::active();
  int64_t px = detail::track(tp, x), pp = detail::track(tp, p);
  Tensor out = Tensor::zeros(x.shape);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < L * D; ++i) out.ptr()[b * L * D + i] = x.ptr()[b * L * D + i] + p.ptr()[i];
  if (tp && (px >= 0 || pp >= 0)) {
    detail::record(tp, out, [px, pp, B, L, D](const Vec& g, Tape& t) {
      if (px >= 0) detail::axpy(t.grad_of(px), g.data(), g.size());
      if (pp >= 0) {
        Vec& gp = t.grad_of(pp);
        for (int64_t b = 0; b < B; ++b)
          for (int64_t i = 0; i < L * D; ++i) gp[i] += g[b * L * D + i];
      }
    });
  }
  return out;
}

// x (B, L, D) + table[idx[b]] per batch row
inline Tensor add_rows_indexed(const Tensor& x, const Tensor& table, const std::vector<int64_t>& idx) {
  int64_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  if (table.ndim() != 2 || table.dim(1) != D || static_cast<int64_t>(idx.size()) != B)
    throw ShapeMismatch("add_rows_indexed: bad table/index");
  for (int64_t i : idx)
    if (i < 0 || i >= table.dim(0)) throw ShapeMismatch("add_rows_indexed: index out of range");
  Tape* tp = Tape::active();
  int64_t px = detail::track(tp, x), pt = detail::track(tp, table);
  Tensor out = Tensor::zeros(x.shape);
  for (int64_t b = 0; b < B; ++b) {
    const double* row = table.ptr() + idx[static_cast<size_t>(b)] * D;
    for (int64_t l = 0; l < L; ++l)
      for (int64_t dd = 0; dd < D; ++dd)
        out.ptr()[(b * L + l) * D + dd] = x.ptr()[(b * L + l) * D + dd] + row[dd];
  }
  if (tp && (px >= 0 || pt >= 0)) {
    detail::record(tp, out, [px, pt, idx, B, L, D](const Vec& g, Tape& t) {
      if (px >= 0) detail::axpy(t.grad_of(px), g.data(), g.size());
      if (pt >= 0) {
        Vec& gt = t.grad_of(pt);
        for (int64_t b = 0; b < B; ++b) {
          double* row = gt.data() + idx[static_cast<size_t>(b)] * D;
          for (int64_t l = 0; l < L; ++l)
            for (int64_t dd = 0; dd < D; ++dd) row[dd] += g[(b * L + l) * D + dd];
        }
      }
    });
  }
  return out;
}

// x (B, L, D) with constant per-row multiplier m (B*L), broadcast over D
inline Tensor mul_rows_const(const Tensor& x, std::shared_ptr<const Vec> m) {
  int64_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  if (static_cast<int64_t>(m->size()) != B * L)
    throw ShapeMismatch("mul_rows_const: multiplier size mismatch");
  Tape* tp = Tape::active();
  int64_t px = detail::track(tp, x);
  Tensor out = Tensor::zeros(x.shape);
  for (int64_t r = 0; r < B * L; ++r) {
    double mv = (*m)[static_cast<size_t>(r)];
    for (int64_t dd = 0; dd < D; ++dd) out.ptr()[r * D + dd] = x.ptr()[r * D + dd] * mv;
  }
  if (tp && px >= 0) {
    detail::record(tp, out, [px, m, B, L, D](const Vec& g, Tape& t) {
      Vec& gx = t.grad_of(px);
      for (int64_t r = 0; r < B * L; ++r) {
        double mv = (*m)[static_cast<size_t>(r)];
        for (int64_t dd = 0; dd < D; ++dd) gx[r * D + dd] += g[r * D + dd] * mv;
      }
    });
  }
  return out;
}

// Concatenate along the last dim; all leading dims must agree.
inline Tensor concat_lastdim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_lastdim: no inputs");
  Shape lead(parts[0].shape.begin(), parts[0].shape.end() - 1);
  int64_t total = 0;
  for (const Tensor& p : parts) {
    Shape pl(p.shape.begin(), p.shape.end() - 1);
    if (pl != lead) throw ShapeMismatch("concat_lastdim: leading dims disagree");
    total += p.dim(-1);
  }
  int64_t rows = shape_numel(lead);
  Shape os = lead;
  os.push_back(total);
  Tape* tp = Tape::active();
  std::vector<int64_t> pids;
  bool any = false;
  for (const Tensor& p : parts) {
    pids.push_back(detail::track(tp, p));
    any = any || pids.back() >= 0;
  }
  Tensor out = Tensor::zeros(os);
  std::vector<int64_t> widths;
  for (const Tensor& p : parts) widths.push_back(p.dim(-1));
  int64_t off = 0;
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    int64_t w = widths[pi];
    const double* src = parts[pi].ptr();
    for (int64_t r = 0; r < rows; ++r)
      std::copy(src + r * w, src + (r + 1) * w, out.ptr() + r * total + off);
    off += w;
  }
  if (tp && any) {
    detail::record(tp, out, [pids, widths, rows, total](const Vec& g, Tape& t) {
      int64_t off2 = 0;
      for (size_t pi = 0; pi < pids.size(); ++pi) {
        int64_t w = widths[pi];
        if (pids[pi] >= 0) {
          Vec& gp = t.grad_of(pids[pi]);
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < w; ++j) gp[r * w + j] += g[r * total + off2 + j];
        }
        off2 += w;
      }
    });
  }
  return out;
}

// x [..., C] -> [..., len] starting at column `off`
inline Tensor slice_lastdim(const Tensor& x, int64_t off, int64_t len) {
  int64_t C = x.dim(-1);
  if (off < 0 || len < 1 || off + len > C) throw ShapeMismatch("slice_lastdim: bad range");
  int64_t rows = x.numel() / C;
  Shape os(x.shape.begin(), x.shape.end() - 1);
  os.push_back(len);
  Tape* tp = Tape::active();
  int64_t px = detail::track(tp, x);
  Tensor out = Tensor::zeros(os);
  for (int64_t r = 0; r < rows; ++r)
    std::copy(x.ptr() + r * C + off, x.ptr() + r * C + off + len, out.ptr() + r * len);
  if (tp && px >= 0) {
    detail::record(tp, out, [px, off, len, C, rows](const Vec& g, Tape& t) {
      Vec& gx = t.grad_of(px);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < len; ++j) gx[r * C + off + j] += g[r * len + j];
    });
  }
  return out;
}

}  // namespace l2s

#endif  // L2S_TENSOR_HPP
