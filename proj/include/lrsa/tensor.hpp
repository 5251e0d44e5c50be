#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lrsa/errors.hpp"
#include "lrsa/kernels.hpp"

// Minimal dense tensor engine with reverse-mode autodiff covering exactly the
// operations the rest of the artifact needs. Buffers are shared between
// tensor handles; every tensor that requires grad owns its gradient buffer
// from creation, so backward lambdas can capture handles by value. Gradients
// accumulate with += in a fixed reverse-topological order: runs with equal
// inputs are bitwise reproducible.

namespace lrsa {

using i64 = std::int64_t;
using Shape = std::vector<i64>;

inline i64 shape_numel(const Shape& s) {
  i64 n = 1;
  for (i64 e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// Graph construction switch. Inference paths disable it so ops on tracked
// parameters do not build nodes. Thread-local because seed sweeps fan out.
inline bool& grad_mode_ref() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_ref()) { grad_mode_ref() = false; }
  ~NoGradGuard() { grad_mode_ref() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct Tensor;

template <typename T>
struct Node {
  std::vector<Tensor<T>> parents;
  std::function<void()> backward_fn;
  bool swept = false;
};

template <typename T>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  bool requires_grad = false;
  std::shared_ptr<std::vector<T>> grad;  // allocated iff requires_grad
  std::shared_ptr<Node<T>> node;          // present iff produced by a tracked op

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<T>>(static_cast<std::size_t>(shape_numel(t.shape)), T(0));
    t.requires_grad = requires_grad;
    if (requires_grad) t.grad = std::make_shared<std::vector<T>>(t.data->size(), T(0));
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<i64>(values.size()))
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<T>>(std::move(values));
    t.requires_grad = requires_grad;
    if (requires_grad) t.grad = std::make_shared<std::vector<T>>(t.data->size(), T(0));
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  i64 numel() const { return data ? static_cast<i64>(data->size()) : 0; }
  i64 rank() const { return static_cast<i64>(shape.size()); }
  i64 rows() const { return rank() >= 1 ? shape[0] : 1; }
  i64 cols() const { return rank() == 2 ? shape[1] : 1; }

  T* ptr() { return data->data(); }
  const T* ptr() const { return data->data(); }
  T& at(i64 i) { return (*data)[static_cast<std::size_t>(i)]; }
  T at(i64 i) const { return (*data)[static_cast<std::size_t>(i)]; }
  T& at(i64 r, i64 c) { return (*data)[static_cast<std::size_t>(r * shape[1] + c)]; }
  T at(i64 r, i64 c) const { return (*data)[static_cast<std::size_t>(r * shape[1] + c)]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape) + " is not a scalar");
    return (*data)[0];
  }

  // Same data buffer, no tracking and no lineage.
  Tensor detached() const {
    Tensor t;
    t.shape = shape;
    t.data = data;
    return t;
  }

  // Data + grad handles without the node: safe to capture in backward
  // lambdas (capturing the node would create a shared_ptr cycle).
  Tensor stripped() const {
    Tensor t;
    t.shape = shape;
    t.data = data;
    t.requires_grad = requires_grad;
    t.grad = grad;
    return t;
  }

  void zero_grad() {
    if (grad)
      for (auto& g : *grad) g = T(0);
  }
};

namespace detail {

template <typename T>
inline bool track(std::initializer_list<const Tensor<T>*> parents) {
  if (!grad_mode_ref()) return false;
  for (const Tensor<T>* p : parents)
    if (p->requires_grad) return true;
  return false;
}

template <typename T>
inline bool track(const std::vector<Tensor<T>>& parents) {
  if (!grad_mode_ref()) return false;
  for (const auto& p : parents)
    if (p.requires_grad) return true;
  return false;
}

// Marks `out` as tracked (allocating its grad) and wires the node. The
// backward_fn must be assigned right after, capturing stripped() handles.
template <typename T>
inline void attach(Tensor<T>& out, std::vector<Tensor<T>> parents) {
  out.requires_grad = true;
  if (!out.grad) out.grad = std::make_shared<std::vector<T>>(out.data->size(), T(0));
  out.node = std::make_shared<Node<T>>();
  out.node->parents = std::move(parents);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward sweep

template <typename T>
void backward(Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw AutogradError("backward: loss must be scalar, got " + shape_str(loss.shape));
  if (!loss.requires_grad || !loss.node)
    throw AutogradError("backward: loss has no gradient lineage");
  if (loss.node->swept)
    throw AutogradError("backward: graph already swept; build a fresh graph first");

  // Iterative post-order DFS; parent order is fixed at op construction, so
  // the sweep (and gradient accumulation) order is deterministic.
  enum class Mark : unsigned char { kOpen, kDone };
  std::vector<Node<T>*> order;
  std::unordered_map<Node<T>*, Mark> marks;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node.get(), 0);
  marks[loss.node.get()] = Mark::kOpen;
  while (!stack.empty()) {
    auto& top = stack.back();
    Node<T>* node = top.first;
    if (top.second < node->parents.size()) {
      Node<T>* child = node->parents[top.second].node.get();
      ++top.second;
      if (child) {
        auto it = marks.find(child);
        if (it == marks.end()) {
          marks.emplace(child, Mark::kOpen);
          stack.emplace_back(child, 0);
        } else if (it->second == Mark::kOpen) {
          throw AutogradError("backward: cycle in graph");
        }
      }
    } else {
      marks[node] = Mark::kDone;
      order.push_back(node);
      stack.pop_back();
    }
  }

  (*loss.grad)[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn();
    (*it)->swept = true;
  }
}

// ---------------------------------------------------------------------------
// linear algebra

// a[m x k] * b[k x n]; accumulation over k is fixed ascending.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
    throw ShapeError("matmul: inner extents disagree: " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  const i64 m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor<T> out = Tensor<T>::zeros({m, n});
  kernels::mm_nn(a.ptr(), b.ptr(), out.ptr(), m, k, n, false);
  if (detail::track<T>({&a, &b})) {
    detail::attach(out, {a, b});
    out.node->backward_fn = [a = a.stripped(), b = b.stripped(), o = out.stripped(), m, k, n]() {
      if (a.requires_grad) kernels::mm_nt(o.grad->data(), b.ptr(), a.grad->data(), m, n, k, true);
      if (b.requires_grad) kernels::mm_tn(a.ptr(), o.grad->data(), b.grad->data(), m, k, n, true);
    };
  }
  return out;
}

// a[m x k] * b[n x k]^T -> [m x n]
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1])
    throw ShapeError("matmul_nt: inner extents disagree: " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  const i64 m = a.shape[0], k = a.shape[1], n = b.shape[0];
  Tensor<T> out = Tensor<T>::zeros({m, n});
  kernels::mm_nt(a.ptr(), b.ptr(), out.ptr(), m, k, n, false);
  if (detail::track<T>({&a, &b})) {
    detail::attach(out, {a, b});
    out.node->backward_fn = [a = a.stripped(), b = b.stripped(), o = out.stripped(), m, k, n]() {
      if (a.requires_grad) kernels::mm_nn(o.grad->data(), b.ptr(), a.grad->data(), m, n, k, true);
      if (b.requires_grad) kernels::mm_tn(o.grad->data(), a.ptr(), b.grad->data(), m, n, k, true);
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape)
    throw ShapeError("add: shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  const i64 n = a.numel();
  for (i64 i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
  if (detail::track<T>({&a, &b})) {
    detail::attach(out, {a, b});
    out.node->backward_fn = [a = a.stripped(), b = b.stripped(), o = out.stripped(), n]() {
      if (a.requires_grad)
        for (i64 i = 0; i < n; ++i) (*a.grad)[i] += (*o.grad)[i];
      if (b.requires_grad)
        for (i64 i = 0; i < n; ++i) (*b.grad)[i] += (*o.grad)[i];
    };
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape)
    throw ShapeError("mul: shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  const i64 n = a.numel();
  for (i64 i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
  if (detail::track<T>({&a, &b})) {
    detail::attach(out, {a, b});
    out.node->backward_fn = [a = a.stripped(), b = b.stripped(), o = out.stripped(), n]() {
      if (a.requires_grad)
        for (i64 i = 0; i < n; ++i) (*a.grad)[i] += (*o.grad)[i] * (*b.data)[i];
      if (b.requires_grad)
        for (i64 i = 0; i < n; ++i) (*b.grad)[i] += (*o.grad)[i] * (*a.data)[i];
    };
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  const i64 n = a.numel();
  for (i64 i = 0; i < n; ++i) out.at(i) = a.at(i) * factor;
  if (detail::track<T>({&a})) {
    detail::attach(out, {a});
    out.node->backward_fn = [a = a.stripped(), o = out.stripped(), factor, n]() {
      if (a.requires_grad)
        for (i64 i = 0; i < n; ++i) (*a.grad)[i] += (*o.grad)[i] * factor;
    };
  }
  return out;
}

// silu(a) * b, the gated MLP nonlinearity.
template <typename T>
Tensor<T> silu_gate(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape)
    throw ShapeError("silu_gate: shape mismatch: " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  const i64 n = a.numel();
  for (i64 i = 0; i < n; ++i) {
    const T x = a.at(i);
    const T sig = T(1) / (T(1) + std::exp(-x));
    out.at(i) = x * sig * b.at(i);
  }
  if (detail::track<T>({&a, &b})) {
    detail::attach(out, {a, b});
    out.node->backward_fn = [a = a.stripped(), b = b.stripped(), o = out.stripped(), n]() {
      for (i64 i = 0; i < n; ++i) {
        const T x = (*a.data)[i];
        const T sig = T(1) / (T(1) + std::exp(-x));
        const T silu = x * sig;
        const T g = (*o.grad)[i];
        if (a.requires_grad) (*a.grad)[i] += g * (*b.data)[i] * (sig + silu * (T(1) - sig));
        if (b.requires_grad) (*b.grad)[i] += g * silu;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

namespace detail {

inline void check_axis(const Shape& shape, i64 axis, const char* op) {
  const i64 r = static_cast<i64>(shape.size());
  if (r < 1 || r > 2 || axis < 0 || axis >= r)
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " +
                     shape_str(shape));
}

// 1D tensors reduce like a single row; 2D axis picks the reduced extent.
// Returns {slices, extent, slice_stride, elem_stride}.
struct AxisView {
  i64 slices, extent, slice_stride, elem_stride;
};

inline AxisView axis_view(const Shape& shape, i64 axis) {
  if (shape.size() == 1) return {1, shape[0], 0, 1};
  if (axis == 1) return {shape[0], shape[1], shape[1], 1};
  return {shape[1], shape[0], 1, shape[1]};
}

inline Shape reduced_shape(const Shape& shape, i64 axis) {
  if (shape.size() == 1) return {};
  return axis == 1 ? Shape{shape[0]} : Shape{shape[1]};
}

}  // namespace detail

// Numerically stabilized softmax along `axis`. -inf entries map to exact 0.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, i64 axis) {
  detail::check_axis(x.shape, axis, "softmax");
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  if (x.rank() == 2 && axis == 1) {
    kernels::softmax_rows(x.ptr(), out.ptr(), x.shape[0], x.shape[1]);
  } else {
    constexpr T kNegInf = -std::numeric_limits<T>::infinity();
    const auto v = detail::axis_view(x.shape, axis);
    for (i64 s = 0; s < v.slices; ++s) {
      const T* xs = x.ptr() + s * v.slice_stride;
      T* ys = out.ptr() + s * v.slice_stride;
      T mx = kNegInf;
      for (i64 j = 0; j < v.extent; ++j) mx = std::max(mx, xs[j * v.elem_stride]);
      if (mx == kNegInf)
        throw DegenerateRowError("softmax: slice with every entry masked (-inf)");
      T sum = T(0);
      for (i64 j = 0; j < v.extent; ++j) {
        const T xv = xs[j * v.elem_stride];
        const T e = xv == kNegInf ? T(0) : std::exp(xv - mx);
        ys[j * v.elem_stride] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (i64 j = 0; j < v.extent; ++j) ys[j * v.elem_stride] *= inv;
    }
  }
  if (detail::track<T>({&x})) {
    detail::attach(out, {x});
    out.node->backward_fn = [x = x.stripped(), o = out.stripped(), axis]() {
      if (!x.requires_grad) return;
      const auto v = detail::axis_view(x.shape, axis);
      for (i64 s = 0; s < v.slices; ++s) {
        const T* y = o.data->data() + s * v.slice_stride;
        const T* g = o.grad->data() + s * v.slice_stride;
        T* dx = x.grad->data() + s * v.slice_stride;
        T dot = T(0);
        for (i64 j = 0; j < v.extent; ++j) dot += g[j * v.elem_stride] * y[j * v.elem_stride];
        for (i64 j = 0; j < v.extent; ++j) {
          const i64 idx = j * v.elem_stride;
          dx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    };
  }
  return out;
}

// Population standard deviation (divide by extent) along `axis`.
// Constant slices yield exactly 0 and propagate zero gradient there.
template <typename T>
Tensor<T> reduce_std(const Tensor<T>& x, i64 axis) {
  detail::check_axis(x.shape, axis, "reduce_std");
  const auto v = detail::axis_view(x.shape, axis);
  Tensor<T> out = Tensor<T>::zeros(detail::reduced_shape(x.shape, axis));
  for (i64 s = 0; s < v.slices; ++s) {
    const T* xs = x.ptr() + s * v.slice_stride;
    bool constant = true;
    for (i64 j = 1; j < v.extent && constant; ++j)
      constant = xs[j * v.elem_stride] == xs[0];
    if (constant) {
      out.at(s) = T(0);
      continue;
    }
    T mean = T(0);
    for (i64 j = 0; j < v.extent; ++j) mean += xs[j * v.elem_stride];
    mean /= static_cast<T>(v.extent);
    T var = T(0);
    for (i64 j = 0; j < v.extent; ++j) {
      const T d = xs[j * v.elem_stride] - mean;
      var += d * d;
    }
    var /= static_cast<T>(v.extent);
    out.at(s) = std::sqrt(var);
  }
  if (detail::track<T>({&x})) {
    detail::attach(out, {x});
    out.node->backward_fn = [x = x.stripped(), o = out.stripped(), axis]() {
      if (!x.requires_grad) return;
      const auto v = detail::axis_view(x.shape, axis);
      for (i64 s = 0; s < v.slices; ++s) {
        const T sd = (*o.data)[s];
        if (sd == T(0)) continue;  // constant slice: subgradient 0
        const T g = (*o.grad)[s];
        const T* xs = x.data->data() + s * v.slice_stride;
        T* dx = x.grad->data() + s * v.slice_stride;
        T mean = T(0);
        for (i64 j = 0; j < v.extent; ++j) mean += xs[j * v.elem_stride];
        mean /= static_cast<T>(v.extent);
        const T c = g / (static_cast<T>(v.extent) * sd);
        for (i64 j = 0; j < v.extent; ++j)
          dx[j * v.elem_stride] += c * (xs[j * v.elem_stride] - mean);
      }
    };
  }
  return out;
}

// Elementwise min and max along `axis`. Used only in mask/score
// construction, which is gradient-detached: outputs carry no lineage.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> reduce_minmax(const Tensor<T>& x, i64 axis) {
  detail::check_axis(x.shape, axis, "reduce_minmax");
  const auto v = detail::axis_view(x.shape, axis);
  Tensor<T> mn = Tensor<T>::zeros(detail::reduced_shape(x.shape, axis));
  Tensor<T> mx = Tensor<T>::zeros(detail::reduced_shape(x.shape, axis));
  for (i64 s = 0; s < v.slices; ++s) {
    const T* xs = x.ptr() + s * v.slice_stride;
    T lo = xs[0], hi = xs[0];
    for (i64 j = 1; j < v.extent; ++j) {
      const T e = xs[j * v.elem_stride];
      lo = e < lo ? e : lo;
      hi = e > hi ? e : hi;
    }
    mn.at(s) = lo;
    mx.at(s) = hi;
  }
  return {mn, mx};
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  const i64 n = x.numel();
  for (i64 i = 0; i < n; ++i) acc += x.at(i);
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (detail::track<T>({&x})) {
    detail::attach(out, {x});
    out.node->backward_fn = [x = x.stripped(), o = out.stripped(), n]() {
      if (!x.requires_grad) return;
      const T g = (*o.grad)[0];
      for (i64 i = 0; i < n; ++i) (*x.grad)[i] += g;
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// row selection and assembly

// Row subset at strictly ascending indices (the cache compaction primitive).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<i64>& idx) {
  if (x.rank() != 2) throw ShapeError("gather_rows: expected 2-d tensor, got " + shape_str(x.shape));
  const i64 n = x.shape[0], d = x.shape[1];
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n)
      throw IndexError("gather_rows: index " + std::to_string(idx[i]) + " out of range [0," +
                       std::to_string(n) + ")");
    if (i > 0 && idx[i] <= idx[i - 1])
      throw IndexError("gather_rows: indices not strictly ascending at position " +
                       std::to_string(i));
  }
  Tensor<T> out = Tensor<T>::zeros({static_cast<i64>(idx.size()), d});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (i64 c = 0; c < d; ++c) out.at(static_cast<i64>(i), c) = x.at(idx[i], c);
  if (detail::track<T>({&x})) {
    detail::attach(out, {x});
    out.node->backward_fn = [x = x.stripped(), o = out.stripped(), idx, d]() {
      if (!x.requires_grad) return;
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (i64 c = 0; c < d; ++c)
          (*x.grad)[idx[i] * d + c] += (*o.grad)[static_cast<i64>(i) * d + c];
    };
  }
  return out;
}

// Row lookup with arbitrary (repeatable) ids — the embedding primitive.
template <typename T>
Tensor<T> embed_rows(const Tensor<T>& table, const std::vector<std::int32_t>& ids) {
  if (table.rank() != 2)
    throw ShapeError("embed_rows: expected 2-d table, got " + shape_str(table.shape));
  const i64 n = table.shape[0], d = table.shape[1];
  for (auto id : ids)
    if (id < 0 || id >= n)
      throw IndexError("embed_rows: id " + std::to_string(id) + " out of range [0," +
                       std::to_string(n) + ")");
  Tensor<T> out = Tensor<T>::zeros({static_cast<i64>(ids.size()), d});
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (i64 c = 0; c < d; ++c) out.at(static_cast<i64>(i), c) = table.at(ids[i], c);
  if (detail::track<T>({&table})) {
    detail::attach(out, {table});
    out.node->backward_fn = [t = table.stripped(), o = out.stripped(), ids, d]() {
      if (!t.requires_grad) return;
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (i64 c = 0; c < d; ++c)
          (*t.grad)[static_cast<i64>(ids[i]) * d + c] += (*o.grad)[static_cast<i64>(i) * d + c];
    };
  }
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, i64 r0, i64 r1) {
  if (x.rank() != 2) throw ShapeError("slice_rows: expected 2-d tensor, got " + shape_str(x.shape));
  if (r0 < 0 || r1 < r0 || r1 > x.shape[0])
    throw ShapeError("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                     ") invalid for " + shape_str(x.shape));
  const i64 d = x.shape[1];
  Tensor<T> out = Tensor<T>::zeros({r1 - r0, d});
  for (i64 r = r0; r < r1; ++r)
    for (i64 c = 0; c < d; ++c) out.at(r - r0, c) = x.at(r, c);
  if (detail::track<T>({&x})) {
    detail::attach(out, {x});
    out.node->backward_fn = [x = x.stripped(), o = out.stripped(), r0, r1, d]() {
      if (!x.requires_grad) return;
      for (i64 r = r0; r < r1; ++r)
        for (i64 c = 0; c < d; ++c) (*x.grad)[r * d + c] += (*o.grad)[(r - r0) * d + c];
    };
  }
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, i64 c0, i64 c1) {
  if (x.rank() != 2) throw ShapeError("slice_cols: expected 2-d tensor, got " + shape_str(x.shape));
  if (c0 < 0 || c1 < c0 || c1 > x.shape[1])
    throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") invalid for " + shape_str(x.shape));
  const i64 m = x.shape[0], d = x.shape[1], w = c1 - c0;
  Tensor<T> out = Tensor<T>::zeros({m, w});
  for (i64 r = 0; r < m; ++r)
    for (i64 c = 0; c < w; ++c) out.at(r, c) = x.at(r, c0 + c);
  if (detail::track<T>({&x})) {
    detail::attach(out, {x});
    out.node->backward_fn = [x = x.stripped(), o = out.stripped(), m, d, c0, w]() {
      if (!x.requires_grad) return;
      for (i64 r = 0; r < m; ++r)
        for (i64 c = 0; c < w; ++c) (*x.grad)[r * d + c0 + c] += (*o.grad)[r * w + c];
    };
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const i64 d = parts[0].cols();
  i64 total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.shape[1] != d)
      throw ShapeError("concat_rows: column mismatch: " + shape_str(p.shape));
    total += p.shape[0];
  }
  Tensor<T> out = Tensor<T>::zeros({total, d});
  i64 r = 0;
  for (const auto& p : parts) {
    for (i64 i = 0; i < p.shape[0]; ++i)
      for (i64 c = 0; c < d; ++c) out.at(r + i, c) = p.at(i, c);
    r += p.shape[0];
  }
  if (detail::track(parts)) {
    detail::attach(out, parts);
    std::vector<Tensor<T>> stripped;
    stripped.reserve(parts.size());
    for (const auto& p : parts) stripped.push_back(p.stripped());
    out.node->backward_fn = [parts = std::move(stripped), o = out.stripped(), d]() {
      i64 r2 = 0;
      for (const auto& p : parts) {
        if (p.requires_grad)
          for (i64 i = 0; i < p.shape[0]; ++i)
            for (i64 c = 0; c < d; ++c) (*p.grad)[i * d + c] += (*o.grad)[(r2 + i) * d + c];
        r2 += p.shape[0];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const i64 m = parts[0].rows();
  i64 total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.shape[0] != m)
      throw ShapeError("concat_cols: row mismatch: " + shape_str(p.shape));
    total += p.shape[1];
  }
  Tensor<T> out = Tensor<T>::zeros({m, total});
  i64 c0 = 0;
  for (const auto& p : parts) {
    for (i64 r = 0; r < m; ++r)
      for (i64 c = 0; c < p.shape[1]; ++c) out.at(r, c0 + c) = p.at(r, c);
    c0 += p.shape[1];
  }
  if (detail::track(parts)) {
    detail::attach(out, parts);
    std::vector<Tensor<T>> stripped;
    stripped.reserve(parts.size());
    for (const auto& p : parts) stripped.push_back(p.stripped());
    out.node->backward_fn = [parts = std::move(stripped), o = out.stripped(), m, total]() {
      i64 c2 = 0;
      for (const auto& p : parts) {
        const i64 w = p.shape[1];
        if (p.requires_grad)
          for (i64 r = 0; r < m; ++r)
            for (i64 c = 0; c < w; ++c) (*p.grad)[r * w + c] += (*o.grad)[r * total + c2 + c];
        c2 += w;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization / position / loss

// Row-wise RMS normalization with a learned per-channel scale.
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& weight, T eps) {
  if (x.rank() != 2 || weight.rank() != 1 || weight.shape[0] != x.shape[1])
    throw ShapeError("rmsnorm: shapes " + shape_str(x.shape) + " vs " + shape_str(weight.shape));
  const i64 m = x.shape[0], d = x.shape[1];
  Tensor<T> out = Tensor<T>::zeros({m, d});
  for (i64 r = 0; r < m; ++r) {
    T ms = T(0);
    for (i64 c = 0; c < d; ++c) ms += x.at(r, c) * x.at(r, c);
    const T inv = T(1) / std::sqrt(ms / static_cast<T>(d) + eps);
    for (i64 c = 0; c < d; ++c) out.at(r, c) = x.at(r, c) * inv * weight.at(c);
  }
  if (detail::track<T>({&x, &weight})) {
    detail::attach(out, {x, weight});
    out.node->backward_fn = [x = x.stripped(), w = weight.stripped(), o = out.stripped(), m, d,
                             eps]() {
      for (i64 r = 0; r < m; ++r) {
        const T* xr = x.data->data() + r * d;
        const T* gr = o.grad->data() + r * d;
        T ms = T(0);
        for (i64 c = 0; c < d; ++c) ms += xr[c] * xr[c];
        const T rms = std::sqrt(ms / static_cast<T>(d) + eps);
        const T inv = T(1) / rms;
        T dot = T(0);
        for (i64 c = 0; c < d; ++c) dot += gr[c] * (*w.data)[c] * xr[c];
        if (x.requires_grad) {
          T* dx = x.grad->data() + r * d;
          const T c3 = dot * inv * inv * inv / static_cast<T>(d);
          for (i64 c = 0; c < d; ++c) dx[c] += gr[c] * (*w.data)[c] * inv - xr[c] * c3;
        }
        if (w.requires_grad)
          for (i64 c = 0; c < d; ++c) (*w.grad)[c] += gr[c] * xr[c] * inv;
      }
    };
  }
  return out;
}

// Rotary position encoding over channel pairs; positions are data, not
// differentiated. Backward applies the inverse rotation to the gradient.
template <typename T>
Tensor<T> rope(const Tensor<T>& x, const std::vector<i64>& positions, double base) {
  if (x.rank() != 2 || x.shape[1] % 2 != 0)
    throw ShapeError("rope: expected 2-d tensor with even channel count, got " +
                     shape_str(x.shape));
  if (static_cast<i64>(positions.size()) != x.shape[0])
    throw ShapeError("rope: " + std::to_string(positions.size()) + " positions for " +
                     shape_str(x.shape));
  const i64 n = x.shape[0], d = x.shape[1];
  Tensor<T> out = Tensor<T>::zeros({n, d});
  kernels::rope_rows(x.ptr(), out.ptr(), n, d, positions.data(), base, +1);
  if (detail::track<T>({&x})) {
    detail::attach(out, {x});
    out.node->backward_fn = [x = x.stripped(), o = out.stripped(), positions, base, n, d]() {
      if (!x.requires_grad) return;
      std::vector<T> tmp(static_cast<std::size_t>(n * d));
      kernels::rope_rows(o.grad->data(), tmp.data(), n, d, positions.data(), base, -1);
      for (i64 i = 0; i < n * d; ++i) (*x.grad)[i] += tmp[i];
    };
  }
  return out;
}

// Mean token-level cross-entropy over rows whose target is >= 0.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::int32_t>& targets) {
  if (logits.rank() != 2 || static_cast<i64>(targets.size()) != logits.shape[0])
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     shape_str(logits.shape));
  const i64 n = logits.shape[0], v = logits.shape[1];
  i64 counted = 0;
  T total = T(0);
  for (i64 r = 0; r < n; ++r) {
    const std::int32_t t = targets[r];
    if (t < 0) continue;
    if (t >= v)
      throw IndexError("cross_entropy: target " + std::to_string(t) + " out of range [0," +
                       std::to_string(v) + ")");
    const T* zr = logits.ptr() + r * v;
    T mx = zr[0];
    for (i64 c = 1; c < v; ++c) mx = std::max(mx, zr[c]);
    T lse = T(0);
    for (i64 c = 0; c < v; ++c) lse += std::exp(zr[c] - mx);
    total += std::log(lse) + mx - zr[t];
    ++counted;
  }
  if (counted == 0) throw ShapeError("cross_entropy: no supervised positions");
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(counted));
  if (detail::track<T>({&logits})) {
    detail::attach(out, {logits});
    out.node->backward_fn = [z = logits.stripped(), o = out.stripped(), targets, n, v, counted]() {
      if (!z.requires_grad) return;
      const T g = (*o.grad)[0] / static_cast<T>(counted);
      for (i64 r = 0; r < n; ++r) {
        const std::int32_t t = targets[r];
        if (t < 0) continue;
        const T* zr = z.data->data() + r * v;
        T* dz = z.grad->data() + r * v;
        T mx = zr[0];
        for (i64 c = 1; c < v; ++c) mx = std::max(mx, zr[c]);
        T lse = T(0);
        for (i64 c = 0; c < v; ++c) lse += std::exp(zr[c] - mx);
        const T inv = T(1) / lse;
        for (i64 c = 0; c < v; ++c) {
          const T p = std::exp(zr[c] - mx) * inv;
          dz[c] += g * (p - (c == t ? T(1) : T(0)));
        }
      }
    };
  }
  return out;
}

}  // namespace lrsa
