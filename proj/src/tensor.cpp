// SPDX-License-Identifier: Apache-2.0
#include "condflow/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "condflow/linalg.hpp"

namespace condflow {

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

namespace {

Shape normalized(Shape s) {
  if (s.empty()) s = {1};
  for (auto d : s)
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(s));
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// TensorT
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> TensorT<T>::zeros(Shape shape) {
  TensorT<T> t;
  t.shape_ = normalized(std::move(shape));
  t.data_ = std::make_shared<std::vector<T>>(shape_numel(t.shape_), T(0));
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::full(Shape shape, T value) {
  TensorT<T> t;
  t.shape_ = normalized(std::move(shape));
  t.data_ = std::make_shared<std::vector<T>>(shape_numel(t.shape_), value);
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::from(Shape shape, std::vector<T> values) {
  TensorT<T> t;
  t.shape_ = normalized(std::move(shape));
  if (shape_numel(t.shape_) != static_cast<std::int64_t>(values.size()))
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not fill shape " + shape_str(t.shape_));
  t.data_ = std::make_shared<std::vector<T>>(std::move(values));
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::of_storage(Shape shape,
                                  std::shared_ptr<std::vector<T>> values) {
  TensorT<T> t;
  t.shape_ = normalized(std::move(shape));
  if (shape_numel(t.shape_) != static_cast<std::int64_t>(values->size()))
    throw ShapeError("storage size does not fill shape " + shape_str(t.shape_));
  t.data_ = std::move(values);
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::randn(Shape shape, Rng& rng, T stddev) {
  TensorT<T> t = zeros(std::move(shape));
  for (auto& v : *t.data_) v = static_cast<T>(rng.normal()) * stddev;
  return t;
}

template <typename T>
T* TensorT<T>::mutable_data() {
  if (tracked())
    throw NumericalError("in-place mutation of a tape-tracked tensor");
  return data_->data();
}

template <typename T>
T TensorT<T>::item() const {
  if (numel() != 1)
    throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
  return (*data_)[0];
}

template <typename T>
TensorT<T> TensorT<T>::detached() const {
  TensorT<T> t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

// ---------------------------------------------------------------------------
// TapeT
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> TapeT<T>::leaf(const TensorT<T>& value, bool requires_grad) {
  if (!requires_grad) return value.detached();
  TensorT<T> t;
  t.shape_ = value.shape();
  t.data_ = value.storage();
  t.tape_ = this;
  t.node_ = static_cast<int>(nodes_.size());
  t.requires_grad_ = true;
  nodes_.push_back(Node{t.shape_, {}, nullptr});
  grads_.emplace_back(nullptr);
  return t;
}

template <typename T>
TensorT<T> TapeT<T>::make_node(Shape shape, std::shared_ptr<std::vector<T>> values,
                               std::vector<int> inputs, BackFn back) {
  TensorT<T> t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(values);
  t.tape_ = this;
  t.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{t.shape_, std::move(inputs), std::move(back)});
  grads_.emplace_back(nullptr);
  return t;
}

template <typename T>
std::vector<T>& TapeT<T>::grad_buf(int i) {
  auto& slot = grads_[static_cast<size_t>(i)];
  if (!slot)
    slot = std::make_unique<std::vector<T>>(
        shape_numel(nodes_[static_cast<size_t>(i)].shape), T(0));
  return *slot;
}

template <typename T>
void TapeT<T>::backward(const TensorT<T>& loss) {
  if (!loss.tracked() || loss.tape() != this)
    throw NumericalError("backward: loss is not on this tape");
  if (loss.numel() != 1)
    throw NumericalError("backward: loss must be scalar, got " +
                         shape_str(loss.shape()));
  if (backward_done_)
    throw NumericalError("backward: tape already consumed");
  backward_done_ = true;
  grad_buf(loss.node())[0] = T(1);
  for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    auto& n = nodes_[static_cast<size_t>(i)];
    if (n.back && grads_[static_cast<size_t>(i)]) n.back(*this);
  }
}

template <typename T>
bool TapeT<T>::has_grad(const TensorT<T>& t) const {
  return t.tracked() && t.tape() == this && backward_done_;
}

template <typename T>
TensorT<T> TapeT<T>::grad(const TensorT<T>& t) const {
  if (!t.tracked() || t.tape() != this)
    throw NumericalError("grad: tensor is not on this tape");
  if (!backward_done_) throw NumericalError("grad: backward has not run");
  const auto& slot = grads_[static_cast<size_t>(t.node())];
  if (!slot) return TensorT<T>::zeros(t.shape());
  return TensorT<T>::from(t.shape(), *slot);
}

// ---------------------------------------------------------------------------
// Broadcasting machinery
// ---------------------------------------------------------------------------

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (size_t i = 0; i < nd; ++i) {
    const std::int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    out[nd - 1 - i] = std::max(da, db);
  }
  return out;
}

namespace {

struct BcastPlan {
  Shape out;
  std::vector<std::int64_t> sa, sb;  // per-out-dim input strides, 0 = stretch
  std::int64_t n = 0;
  bool dense_a = true, dense_b = true;  // true if input is laid out like out
};

std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size());
  std::int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

std::vector<std::int64_t> bcast_strides(const Shape& in, const Shape& out,
                                        bool& dense) {
  auto in_st = row_major_strides(in);
  std::vector<std::int64_t> st(out.size(), 0);
  dense = shape_numel(in) == shape_numel(out);
  const size_t off = out.size() - in.size();
  for (size_t i = 0; i < in.size(); ++i) {
    if (in[i] == out[off + i]) {
      st[off + i] = in_st[i];
    } else {  // in[i] == 1, stretched
      st[off + i] = 0;
      if (out[off + i] != 1) dense = false;
    }
  }
  return st;
}

BcastPlan plan_bcast(const Shape& a, const Shape& b) {
  BcastPlan p;
  p.out = broadcast_shape(a, b);
  p.n = shape_numel(p.out);
  p.sa = bcast_strides(a, p.out, p.dense_a);
  p.sb = bcast_strides(b, p.out, p.dense_b);
  return p;
}

// Visits (flat_out, flat_a, flat_b) for every output element.
template <typename F>
void bcast_visit(const BcastPlan& p, F f) {
  if (p.dense_a && p.dense_b) {
    for (std::int64_t o = 0; o < p.n; ++o) f(o, o, o);
    return;
  }
  const size_t nd = p.out.size();
  std::vector<std::int64_t> idx(nd, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t o = 0; o < p.n; ++o) {
    f(o, oa, ob);
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      const auto du = static_cast<size_t>(d);
      ++idx[du];
      oa += p.sa[du];
      ob += p.sb[du];
      if (idx[du] < p.out[du]) break;
      oa -= p.sa[du] * p.out[du];
      ob -= p.sb[du] * p.out[du];
      idx[du] = 0;
    }
  }
}

template <typename T>
TensorT<T> wrap(Shape shape, std::shared_ptr<std::vector<T>> values) {
  return TensorT<T>::from(std::move(shape), std::move(*values));
}

template <typename T>
void check_same_tape(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.tracked() && b.tracked() && a.tape() != b.tape())
    throw NumericalError("operands live on different tapes");
}

// Shared skeleton for broadcasting binary ops. DA/DB compute the local
// derivative contribution given (grad_out, a_val, b_val, out_val).
template <typename T, typename F, typename DA, typename DB>
TensorT<T> binary_op(const TensorT<T>& a, const TensorT<T>& b, F f, DA da,
                     DB db) {
  check_same_tape(a, b);
  BcastPlan p = plan_bcast(a.shape(), b.shape());
  auto out = std::make_shared<std::vector<T>>(p.n);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out->data();
  bcast_visit(p, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
    po[o] = f(pa[ia], pb[ib]);
  });
  TapeT<T>* tape = a.tracked() ? a.tape() : (b.tracked() ? b.tape() : nullptr);
  if (!tape) return TensorT<T>::of_storage(p.out, out);
  const int na = a.tracked() ? a.node() : -1;
  const int nb = b.tracked() ? b.node() : -1;
  auto as = a.storage();
  auto bs = b.storage();
  auto os = out;
  TensorT<T> r = tape->make_node(
      p.out, out, {na, nb}, nullptr);
  const int self = r.node();
  auto back = [p, as, bs, os, na, nb, da, db, self](TapeT<T>& tp) {
    const std::vector<T>& go = tp.grad_buf(self);
    const T* gpo = go.data();
    const T* pa2 = as->data();
    const T* pb2 = bs->data();
    const T* po2 = os->data();
    if (na >= 0) {
      std::vector<T>& ga = tp.grad_buf(na);
      T* gpa = ga.data();
      bcast_visit(p, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
        gpa[ia] += da(gpo[o], pa2[ia], pb2[ib], po2[o]);
      });
    }
    if (nb >= 0) {
      std::vector<T>& gb = tp.grad_buf(nb);
      T* gpb = gb.data();
      bcast_visit(p, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
        gpb[ib] += db(gpo[o], pa2[ia], pb2[ib], po2[o]);
      });
    }
  };
  // Patch the back-fn in (it needed the node id).
  return tape->make_node_backpatch(r, std::move(back));
}

template <typename T, typename F, typename D>
TensorT<T> unary_op(const TensorT<T>& a, F f, D dfda) {
  const std::int64_t n = a.numel();
  auto out = std::make_shared<std::vector<T>>(n);
  const T* pa = a.data();
  T* po = out->data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i]);
  if (!a.tracked()) {
    return TensorT<T>::of_storage(a.shape(), out);
  }
  TapeT<T>* tape = a.tape();
  const int na = a.node();
  auto as = a.storage();
  auto os = out;
  TensorT<T> r = tape->make_node(a.shape(), out, {na}, nullptr);
  const int self = r.node();
  auto back = [as, os, na, dfda, n, self](TapeT<T>& tp) {
    const std::vector<T>& go = tp.grad_buf(self);
    std::vector<T>& ga = tp.grad_buf(na);
    const T* gpo = go.data();
    T* gpa = ga.data();
    const T* pa2 = as->data();
    const T* po2 = os->data();
    for (std::int64_t i = 0; i < n; ++i)
      gpa[i] += gpo[i] * dfda(pa2[i], po2[i]);
  };
  return tape->make_node_backpatch(r, std::move(back));
}

}  // namespace

// make_node_backpatch: helper to install the back fn once the node id is
// known. Declared here (not in the public header) and befriended via
// make_node's access pattern: we add it as a member.
template <typename T>
TensorT<T> TapeT<T>::make_node_backpatch(const TensorT<T>& t, BackFn back) {
  nodes_[static_cast<size_t>(t.node())].back = std::move(back);
  return t;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x + y; },
      [](T g, T, T, T) { return g; }, [](T g, T, T, T) { return g; });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x - y; },
      [](T g, T, T, T) { return g; }, [](T g, T, T, T) { return -g; });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x * y; },
      [](T g, T, T y, T) { return g * y; },
      [](T g, T x, T, T) { return g * x; });
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  for (const T v : b.values())
    if (v == T(0)) throw DomainError("division by exact zero");
  return binary_op(
      a, b, [](T x, T y) { return x / y; },
      [](T g, T, T y, T) { return g / y; },
      [](T g, T, T y, T o) { return -g * o / y; });
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T s) {
  return unary_op(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& a, T s) {
  return unary_op(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
TensorT<T> neg(const TensorT<T>& a) {
  return mul_scalar(a, T(-1));
}

template <typename T>
TensorT<T> exp(const TensorT<T>& a) {
  TensorT<T> r = unary_op(a, [](T x) { return std::exp(x); },
                          [](T, T o) { return o; });
  for (const T v : r.values())
    if (!std::isfinite(v)) throw DomainError("exp overflow to non-finite");
  return r;
}

template <typename T>
TensorT<T> log(const TensorT<T>& a) {
  for (const T v : a.values())
    if (!(v > T(0))) throw DomainError("log of nonpositive value");
  return unary_op(a, [](T x) { return std::log(x); },
                  [](T x, T) { return T(1) / x; });
}

template <typename T>
TensorT<T> sqrt(const TensorT<T>& a) {
  for (const T v : a.values())
    if (v < T(0)) throw DomainError("sqrt of negative value");
  return unary_op(a, [](T x) { return std::sqrt(x); },
                  [](T, T o) { return T(0.5) / o; });
}

template <typename T>
TensorT<T> tanh(const TensorT<T>& a) {
  return unary_op(a, [](T x) { return std::tanh(x); },
                  [](T, T o) { return T(1) - o * o; });
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
  return unary_op(a, [](T x) { return x > T(0) ? x : T(0); },
                  [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

namespace {

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T stable_softplus(T x) {
  if (x > T(25)) return x;
  if (x < T(-25)) return std::exp(x);
  return std::log1p(std::exp(x));
}

}  // namespace

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& a) {
  return unary_op(a, [](T x) { return stable_sigmoid(x); },
                  [](T, T o) { return o * (T(1) - o); });
}

template <typename T>
TensorT<T> softplus(const TensorT<T>& a) {
  return unary_op(a, [](T x) { return stable_softplus(x); },
                  [](T x, T) { return stable_sigmoid(x); });
}

template <typename T>
TensorT<T> abs(const TensorT<T>& a) {
  return unary_op(a, [](T x) { return std::abs(x); },
                  [](T x, T) { return x >= T(0) ? T(1) : T(-1); });
}

template <typename T>
TensorT<T> clamp_min(const TensorT<T>& a, T lo) {
  return unary_op(a, [lo](T x) { return x < lo ? lo : x; },
                  [lo](T x, T) { return x > lo ? T(1) : T(0); });
}

template <typename T>
TensorT<T> clamp(const TensorT<T>& a, T lo, T hi) {
  return unary_op(
      a, [lo, hi](T x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

template <typename T>
TensorT<T> buggy_scale2(const TensorT<T>& a) {
  return unary_op(a, [](T x) { return T(2) * x; },
                  [](T, T) { return T(3); });  // deliberately wrong
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace {

// Maps every flat input index to the flat index of the reduced output
// (keepdims layout). reduced[i] marks axes summed away.
template <typename T, typename F>
void reduce_visit(const Shape& in, const std::vector<bool>& reduced, F f) {
  Shape out_shape = in;
  for (size_t i = 0; i < in.size(); ++i)
    if (reduced[i]) out_shape[i] = 1;
  auto out_st = row_major_strides(out_shape);
  std::vector<std::int64_t> st(in.size());
  for (size_t i = 0; i < in.size(); ++i) st[i] = reduced[i] ? 0 : out_st[i];
  const std::int64_t n = shape_numel(in);
  const size_t nd = in.size();
  std::vector<std::int64_t> idx(nd, 0);
  std::int64_t oo = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    f(i, oo);
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      const auto du = static_cast<size_t>(d);
      ++idx[du];
      oo += st[du];
      if (idx[du] < in[du]) break;
      oo -= st[du] * in[du];
      idx[du] = 0;
    }
  }
}

}  // namespace

template <typename T>
TensorT<T> sum_axes(const TensorT<T>& a, std::vector<int> axes, bool keepdims) {
  const auto nd = a.ndim();
  std::vector<bool> reduced(static_cast<size_t>(nd), false);
  for (int ax : axes) {
    if (ax < 0 || ax >= nd)
      throw ShapeError("sum_axes: axis " + std::to_string(ax) +
                       " out of range for " + shape_str(a.shape()));
    reduced[static_cast<size_t>(ax)] = true;
  }
  Shape keep_shape = a.shape();
  for (size_t i = 0; i < keep_shape.size(); ++i)
    if (reduced[i]) keep_shape[i] = 1;
  auto out = std::make_shared<std::vector<T>>(shape_numel(keep_shape), T(0));
  const T* pa = a.data();
  T* po = out->data();
  reduce_visit<T>(a.shape(), reduced,
                  [&](std::int64_t i, std::int64_t oo) { po[oo] += pa[i]; });

  TensorT<T> r;
  if (!a.tracked()) {
    r = TensorT<T>::of_storage(keep_shape, out);
  } else {
    TapeT<T>* tape = a.tape();
    const int na = a.node();
    const Shape in_shape = a.shape();
    r = tape->make_node(keep_shape, out, {na}, nullptr);
    const int self = r.node();
    auto back = [in_shape, reduced, na, self](TapeT<T>& tp) {
      const std::vector<T>& go = tp.grad_buf(self);
      std::vector<T>& ga = tp.grad_buf(na);
      const T* gpo = go.data();
      T* gpa = ga.data();
      reduce_visit<T>(in_shape, reduced,
                      [&](std::int64_t i, std::int64_t oo) { gpa[i] += gpo[oo]; });
    };
    r = tape->make_node_backpatch(r, std::move(back));
  }
  if (keepdims) return r;
  Shape squeezed;
  for (size_t i = 0; i < keep_shape.size(); ++i)
    if (!reduced[i]) squeezed.push_back(keep_shape[i]);
  if (squeezed.empty()) squeezed = {1};
  return reshape(r, squeezed);
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& a) {
  std::vector<int> axes(static_cast<size_t>(a.ndim()));
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  return sum_axes(a, axes, /*keepdims=*/false);
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& a) {
  return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
TensorT<T> sum_except_dim0(const TensorT<T>& a) {
  std::vector<int> axes;
  for (int i = 1; i < a.ndim(); ++i) axes.push_back(i);
  if (axes.empty()) return a;  // already {N}
  return sum_axes(a, axes, /*keepdims=*/false);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape shape) {
  shape = normalized(std::move(shape));
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " +
                     shape_str(shape) + " changes element count");
  if (!a.tracked()) return TensorT<T>::of_storage(shape, a.storage());
  TapeT<T>* tape = a.tape();
  const int na = a.node();
  const std::int64_t n = a.numel();
  TensorT<T> r = tape->make_node(shape, a.storage(), {na}, nullptr);
  const int self = r.node();
  auto back = [na, n, self](TapeT<T>& tp) {
    const std::vector<T>& go = tp.grad_buf(self);
    std::vector<T>& ga = tp.grad_buf(na);
    for (std::int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += go[static_cast<size_t>(i)];
  };
  return tape->make_node_backpatch(r, std::move(back));
}

namespace {

struct AxisSplit {
  std::int64_t outer = 1, axis = 1, inner = 1;
};

AxisSplit axis_split(const Shape& s, int axis) {
  AxisSplit sp;
  for (int i = 0; i < static_cast<int>(s.size()); ++i) {
    const auto d = s[static_cast<size_t>(i)];
    if (i < axis)
      sp.outer *= d;
    else if (i == axis)
      sp.axis = d;
    else
      sp.inner *= d;
  }
  return sp;
}

}  // namespace

template <typename T>
TensorT<T> narrow(const TensorT<T>& a, int axis, std::int64_t start,
                  std::int64_t len) {
  if (axis < 0 || axis >= a.ndim())
    throw ShapeError("narrow: bad axis " + std::to_string(axis));
  const std::int64_t extent = a.dim(axis);
  if (start < 0 || len < 0 || start + len > extent)
    throw ShapeError("narrow: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") exceeds extent " +
                     std::to_string(extent));
  const AxisSplit sp = axis_split(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  auto out = std::make_shared<std::vector<T>>(sp.outer * len * sp.inner);
  const T* pa = a.data();
  T* po = out->data();
  for (std::int64_t o = 0; o < sp.outer; ++o)
    std::memcpy(po + o * len * sp.inner,
                pa + (o * sp.axis + start) * sp.inner,
                static_cast<size_t>(len * sp.inner) * sizeof(T));
  if (!a.tracked()) {
    return TensorT<T>::of_storage(out_shape, out);
  }
  TapeT<T>* tape = a.tape();
  const int na = a.node();
  TensorT<T> r = tape->make_node(out_shape, out, {na}, nullptr);
  const int self = r.node();
  auto back = [sp, start, len, na, self](TapeT<T>& tp) {
    const std::vector<T>& go = tp.grad_buf(self);
    std::vector<T>& ga = tp.grad_buf(na);
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      const T* g = go.data() + o * len * sp.inner;
      T* dst = ga.data() + (o * sp.axis + start) * sp.inner;
      for (std::int64_t i = 0; i < len * sp.inner; ++i) dst[i] += g[i];
    }
  };
  return tape->make_node_backpatch(r, std::move(back));
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto nd = parts[0].ndim();
  if (axis < 0 || axis >= nd)
    throw ShapeError("concat: bad axis " + std::to_string(axis));
  std::int64_t total_axis = 0;
  for (const auto& p : parts) {
    if (p.ndim() != nd)
      throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != axis && p.dim(i) != parts[0].dim(i))
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) +
                         " vs " + shape_str(parts[0].shape()));
    total_axis += p.dim(axis);
  }
  Shape out_shape = parts[0].shape();
  out_shape[static_cast<size_t>(axis)] = total_axis;
  const AxisSplit osp = axis_split(out_shape, axis);
  auto out = std::make_shared<std::vector<T>>(shape_numel(out_shape));
  T* po = out->data();
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t alen = p.dim(axis);
    const T* pp = p.data();
    for (std::int64_t o = 0; o < osp.outer; ++o)
      std::memcpy(po + (o * total_axis + off) * osp.inner,
                  pp + o * alen * osp.inner,
                  static_cast<size_t>(alen * osp.inner) * sizeof(T));
    off += alen;
  }
  TapeT<T>* tape = nullptr;
  for (const auto& p : parts) {
    if (p.tracked()) {
      if (tape && p.tape() != tape)
        throw NumericalError("concat: operands on different tapes");
      tape = p.tape();
    }
  }
  if (!tape) {
    return TensorT<T>::of_storage(out_shape, out);
  }
  struct PartInfo {
    int node;
    std::int64_t alen, off;
  };
  std::vector<PartInfo> infos;
  std::vector<int> input_ids;
  {
    std::int64_t running = 0;
    for (const auto& p : parts) {
      infos.push_back(PartInfo{p.tracked() ? p.node() : -1, p.dim(axis), running});
      running += p.dim(axis);
      input_ids.push_back(p.tracked() ? p.node() : -1);
    }
  }
  TensorT<T> r = tape->make_node(out_shape, out, input_ids, nullptr);
  const int self = r.node();
  auto back = [infos, osp, total_axis, self](TapeT<T>& tp) {
    const std::vector<T>& go = tp.grad_buf(self);
    for (const auto& info : infos) {
      if (info.node < 0) continue;
      std::vector<T>& ga = tp.grad_buf(info.node);
      for (std::int64_t o = 0; o < osp.outer; ++o) {
        const T* g = go.data() + (o * total_axis + info.off) * osp.inner;
        T* dst = ga.data() + o * info.alen * osp.inner;
        for (std::int64_t i = 0; i < info.alen * osp.inner; ++i) dst[i] += g[i];
      }
    }
  };
  return tape->make_node_backpatch(r, std::move(back));
}

// ---------------------------------------------------------------------------
// squeeze / unsqueeze / maxpool
// ---------------------------------------------------------------------------

namespace {

// flat-index map for squeeze2x2: returns input flat index for output
// coordinates. Output channel 4c+k picks block corner k of input channel c,
// k in scan order TL,TR,BL,BR.
struct Sq {
  std::int64_t N, C, H, W;
  std::int64_t in_index(std::int64_t n, std::int64_t oc, std::int64_t oh,
                        std::int64_t ow) const {
    const std::int64_t c = oc / 4, k = oc % 4;
    const std::int64_t ih = 2 * oh + (k >> 1), iw = 2 * ow + (k & 1);
    return ((n * C + c) * H + ih) * W + iw;
  }
};

template <typename T>
void require_nchw(const TensorT<T>& a, const char* who) {
  if (a.ndim() != 4)
    throw ShapeError(std::string(who) + ": expected NCHW tensor, got " +
                     shape_str(a.shape()));
}

}  // namespace

template <typename T>
TensorT<T> squeeze2x2(const TensorT<T>& a) {
  require_nchw(a, "squeeze2x2");
  const std::int64_t N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  if (H % 2 != 0 || W % 2 != 0)
    throw ShapeError("squeeze2x2: odd spatial extent in " +
                     shape_str(a.shape()));
  const Sq sq{N, C, H, W};
  const Shape out_shape{N, 4 * C, H / 2, W / 2};
  auto out = std::make_shared<std::vector<T>>(a.numel());
  const T* pa = a.data();
  T* po = out->data();
  std::int64_t o = 0;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t oc = 0; oc < 4 * C; ++oc)
      for (std::int64_t oh = 0; oh < H / 2; ++oh)
        for (std::int64_t ow = 0; ow < W / 2; ++ow)
          po[o++] = pa[sq.in_index(n, oc, oh, ow)];
  if (!a.tracked()) {
    return TensorT<T>::of_storage(out_shape, out);
  }
  TapeT<T>* tape = a.tape();
  const int na = a.node();
  TensorT<T> r = tape->make_node(out_shape, out, {na}, nullptr);
  const int self = r.node();
  auto back = [sq, na, self](TapeT<T>& tp) {
    const std::vector<T>& go = tp.grad_buf(self);
    std::vector<T>& ga = tp.grad_buf(na);
    std::int64_t o = 0;
    for (std::int64_t n = 0; n < sq.N; ++n)
      for (std::int64_t oc = 0; oc < 4 * sq.C; ++oc)
        for (std::int64_t oh = 0; oh < sq.H / 2; ++oh)
          for (std::int64_t ow = 0; ow < sq.W / 2; ++ow)
            ga[static_cast<size_t>(sq.in_index(n, oc, oh, ow))] += go[static_cast<size_t>(o++)];
  };
  return tape->make_node_backpatch(r, std::move(back));
}

template <typename T>
TensorT<T> unsqueeze2x2(const TensorT<T>& a) {
  require_nchw(a, "unsqueeze2x2");
  const std::int64_t N = a.dim(0), C4 = a.dim(1), Hh = a.dim(2), Wh = a.dim(3);
  if (C4 % 4 != 0)
    throw ShapeError("unsqueeze2x2: channel count not divisible by 4 in " +
                     shape_str(a.shape()));
  const std::int64_t C = C4 / 4, H = 2 * Hh, W = 2 * Wh;
  const Sq sq{N, C, H, W};
  const Shape out_shape{N, C, H, W};
  auto out = std::make_shared<std::vector<T>>(a.numel());
  const T* pa = a.data();
  T* po = out->data();
  std::int64_t i = 0;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t oc = 0; oc < C4; ++oc)
      for (std::int64_t oh = 0; oh < Hh; ++oh)
        for (std::int64_t ow = 0; ow < Wh; ++ow)
          po[sq.in_index(n, oc, oh, ow)] = pa[i++];
  if (!a.tracked()) {
    return TensorT<T>::of_storage(out_shape, out);
  }
  TapeT<T>* tape = a.tape();
  const int na = a.node();
  TensorT<T> r = tape->make_node(out_shape, out, {na}, nullptr);
  const int self = r.node();
  auto back = [sq, C4, Hh, Wh, na, self](TapeT<T>& tp) {
    const std::vector<T>& go = tp.grad_buf(self);
    std::vector<T>& ga = tp.grad_buf(na);
    std::int64_t i = 0;
    for (std::int64_t n = 0; n < sq.N; ++n)
      for (std::int64_t oc = 0; oc < C4; ++oc)
        for (std::int64_t oh = 0; oh < Hh; ++oh)
          for (std::int64_t ow = 0; ow < Wh; ++ow)
            ga[static_cast<size_t>(i++)] += go[static_cast<size_t>(sq.in_index(n, oc, oh, ow))];
  };
  return tape->make_node_backpatch(r, std::move(back));
}

template <typename T>
TensorT<T> maxpool2x2(const TensorT<T>& a) {
  require_nchw(a, "maxpool2x2");
  const std::int64_t N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  if (H % 2 != 0 || W % 2 != 0)
    throw ShapeError("maxpool2x2: odd spatial extent in " +
                     shape_str(a.shape()));
  const Shape out_shape{N, C, H / 2, W / 2};
  const std::int64_t on = shape_numel(out_shape);
  auto out = std::make_shared<std::vector<T>>(on);
  auto argmax = std::make_shared<std::vector<std::int64_t>>(on);
  const T* pa = a.data();
  T* po = out->data();
  std::int64_t o = 0;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t oh = 0; oh < H / 2; ++oh)
        for (std::int64_t ow = 0; ow < W / 2; ++ow) {
          const std::int64_t base = ((n * C + c) * H + 2 * oh) * W + 2 * ow;
          std::int64_t best = base;
          T bv = pa[base];
          const std::int64_t cand[3] = {base + 1, base + W, base + W + 1};
          for (const std::int64_t idx : cand)
            if (pa[idx] > bv) {
              bv = pa[idx];
              best = idx;
            }
          po[o] = bv;
          (*argmax)[static_cast<size_t>(o)] = best;
          ++o;
        }
  if (!a.tracked()) {
    return TensorT<T>::of_storage(out_shape, out);
  }
  TapeT<T>* tape = a.tape();
  const int na = a.node();
  TensorT<T> r = tape->make_node(out_shape, out, {na}, nullptr);
  const int self = r.node();
  auto back = [argmax, on, na, self](TapeT<T>& tp) {
    const std::vector<T>& go = tp.grad_buf(self);
    std::vector<T>& ga = tp.grad_buf(na);
    for (std::int64_t i = 0; i < on; ++i)
      ga[static_cast<size_t>((*argmax)[static_cast<size_t>(i)])] += go[static_cast<size_t>(i)];
  };
  return tape->make_node_backpatch(r, std::move(back));
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& kernel, int pad_h,
                  int pad_w, int stride_h, int stride_w) {
  require_nchw(input, "conv2d input");
  require_nchw(kernel, "conv2d kernel");
  check_same_tape(input, kernel);
  const std::int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2),
                     W = input.dim(3);
  const std::int64_t O = kernel.dim(0), CK = kernel.dim(1), KH = kernel.dim(2),
                     KW = kernel.dim(3);
  if (C != CK)
    throw ShapeError("conv2d: input channels " + std::to_string(C) +
                     " != kernel channels " + std::to_string(CK));
  if (pad_h < 0 || pad_w < 0 || stride_h < 1 || stride_w < 1)
    throw ShapeError("conv2d: bad padding/stride");
  if (KH > H + 2 * pad_h || KW > W + 2 * pad_w)
    throw ShapeError("conv2d: kernel larger than padded input");
  const std::int64_t OH = (H + 2 * pad_h - KH) / stride_h + 1;
  const std::int64_t OW = (W + 2 * pad_w - KW) / stride_w + 1;
  const Shape out_shape{N, O, OH, OW};
  auto out = std::make_shared<std::vector<T>>(shape_numel(out_shape), T(0));
  const T* pin = input.data();
  const T* pk = kernel.data();
  T* po = out->data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t o = 0; o < O; ++o)
      for (std::int64_t oh = 0; oh < OH; ++oh) {
        const std::int64_t ih0 = oh * stride_h - pad_h;
        const std::int64_t kh_lo = std::max<std::int64_t>(0, -ih0);
        const std::int64_t kh_hi = std::min<std::int64_t>(KH, H - ih0);
        for (std::int64_t ow = 0; ow < OW; ++ow) {
          const std::int64_t iw0 = ow * stride_w - pad_w;
          const std::int64_t kw_lo = std::max<std::int64_t>(0, -iw0);
          const std::int64_t kw_hi = std::min<std::int64_t>(KW, W - iw0);
          T acc = 0;
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t kh = kh_lo; kh < kh_hi; ++kh) {
              const T* irow = pin + ((n * C + c) * H + ih0 + kh) * W + iw0;
              const T* krow = pk + ((o * C + c) * KH + kh) * KW;
              for (std::int64_t kw = kw_lo; kw < kw_hi; ++kw)
                acc += irow[kw] * krow[kw];
            }
          po[((n * O + o) * OH + oh) * OW + ow] = acc;
        }
      }
  TapeT<T>* tape = input.tracked() ? input.tape()
                                   : (kernel.tracked() ? kernel.tape() : nullptr);
  if (!tape) {
    return TensorT<T>::of_storage(out_shape, out);
  }
  const int ni = input.tracked() ? input.node() : -1;
  const int nk = kernel.tracked() ? kernel.node() : -1;
  auto is = input.storage();
  auto ks = kernel.storage();
  TensorT<T> r = tape->make_node(out_shape, out, {ni, nk}, nullptr);
  const int self = r.node();
  auto back = [=](TapeT<T>& tp) {
    const std::vector<T>& go = tp.grad_buf(self);
    const T* gpo = go.data();
    const T* pin2 = is->data();
    const T* pk2 = ks->data();
    T* gin = nullptr;
    T* gk = nullptr;
    if (ni >= 0) gin = tp.grad_buf(ni).data();
    if (nk >= 0) gk = tp.grad_buf(nk).data();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t o = 0; o < O; ++o)
        for (std::int64_t oh = 0; oh < OH; ++oh) {
          const std::int64_t ih0 = oh * stride_h - pad_h;
          const std::int64_t kh_lo = std::max<std::int64_t>(0, -ih0);
          const std::int64_t kh_hi = std::min<std::int64_t>(KH, H - ih0);
          for (std::int64_t ow = 0; ow < OW; ++ow) {
            const std::int64_t iw0 = ow * stride_w - pad_w;
            const std::int64_t kw_lo = std::max<std::int64_t>(0, -iw0);
            const std::int64_t kw_hi = std::min<std::int64_t>(KW, W - iw0);
            const T g = gpo[((n * O + o) * OH + oh) * OW + ow];
            if (g == T(0)) continue;
            for (std::int64_t c = 0; c < C; ++c)
              for (std::int64_t kh = kh_lo; kh < kh_hi; ++kh) {
                const std::int64_t ibase = ((n * C + c) * H + ih0 + kh) * W + iw0;
                const std::int64_t kbase = ((o * C + c) * KH + kh) * KW;
                if (gin && gk) {
                  for (std::int64_t kw = kw_lo; kw < kw_hi; ++kw) {
                    gin[ibase + kw] += g * pk2[kbase + kw];
                    gk[kbase + kw] += g * pin2[ibase + kw];
                  }
                } else if (gin) {
                  for (std::int64_t kw = kw_lo; kw < kw_hi; ++kw)
                    gin[ibase + kw] += g * pk2[kbase + kw];
                } else {
                  for (std::int64_t kw = kw_lo; kw < kw_hi; ++kw)
                    gk[kbase + kw] += g * pin2[ibase + kw];
                }
              }
          }
        }
  };
  return tape->make_node_backpatch(r, std::move(back));
}

// ---------------------------------------------------------------------------
// logabsdet
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> logabsdet(const TensorT<T>& w, double min_abs_det) {
  if (w.ndim() != 2 || w.dim(0) != w.dim(1))
    throw ShapeError("logabsdet: expected square matrix, got " +
                     shape_str(w.shape()));
  const int C = static_cast<int>(w.dim(0));
  const auto lu = linalg::lu_factor<T>(w.values(), C);
  if (!lu.ok || std::exp(lu.log_abs_det) < min_abs_det)
    throw SingularError("logabsdet: |det| below " +
                        std::to_string(min_abs_det));
  auto out = std::make_shared<std::vector<T>>(1, static_cast<T>(lu.log_abs_det));
  if (!w.tracked()) return TensorT<T>::of_storage({1}, out);
  // d log|det W| / dW = W^{-T}, computed up front from the factorization.
  std::vector<T> inv = linalg::lu_inverse<T>(lu);
  TapeT<T>* tape = w.tape();
  const int nw = w.node();
  TensorT<T> r = tape->make_node({1}, out, {nw}, nullptr);
  const int self = r.node();
  auto back = [inv = std::move(inv), C, nw, self](TapeT<T>& tp) {
    const T g = tp.grad_buf(self)[0];
    std::vector<T>& gw = tp.grad_buf(nw);
    for (int i = 0; i < C; ++i)
      for (int j = 0; j < C; ++j)
        gw[static_cast<size_t>(i * C + j)] += g * inv[static_cast<size_t>(j * C + i)];
  };
  return tape->make_node_backpatch(r, std::move(back));
}

// ---------------------------------------------------------------------------
// grad_check
// ---------------------------------------------------------------------------

template <typename T>
GradCheckReport grad_check(
    const std::function<TensorT<T>(TapeT<T>&, const TensorT<T>&)>& f,
    const TensorT<T>& x, double step) {
  GradCheckReport rep;
  TensorT<T> analytic;
  try {
    TapeT<T> tape;
    TensorT<T> xl = tape.leaf(x);
    TensorT<T> y = f(tape, xl);
    if (y.numel() != 1)
      throw NumericalError("grad_check: f must return a scalar");
    if (!std::isfinite(static_cast<double>(y.item()))) {
      rep.oracle_failed = true;
      rep.message = "f(x) is not finite";
      return rep;
    }
    tape.backward(y);
    analytic = tape.grad(xl);
  } catch (const NumericalError&) {
    throw;
  } catch (const std::exception& e) {
    rep.oracle_failed = true;
    rep.message = std::string("f(x) raised: ") + e.what();
    return rep;
  }

  auto eval_at = [&](const std::vector<T>& vals) -> double {
    TapeT<T> tape;
    TensorT<T> xp = TensorT<T>::from(x.shape(), vals);
    TensorT<T> xl = tape.leaf(xp);
    TensorT<T> y = f(tape, xl);
    return static_cast<double>(y.item());
  };

  const std::int64_t n = x.numel();
  std::vector<T> base = x.values();
  for (std::int64_t i = 0; i < n; ++i) {
    std::vector<T> vp = base, vm = base;
    vp[static_cast<size_t>(i)] += static_cast<T>(step);
    vm[static_cast<size_t>(i)] -= static_cast<T>(step);
    double fp, fm;
    try {
      fp = eval_at(vp);
      fm = eval_at(vm);
    } catch (const std::exception& e) {
      rep.oracle_failed = true;
      rep.message = std::string("perturbed eval raised: ") + e.what();
      return rep;
    }
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      rep.oracle_failed = true;
      rep.message = "perturbed f(x) is not finite at coordinate " +
                    std::to_string(i);
      return rep;
    }
    const double num = (fp - fm) / (2.0 * step);
    const double ana = static_cast<double>(analytic.at(i));
    const double denom = std::max({std::abs(ana), std::abs(num), 1e-12});
    const double rel = std::abs(ana - num) / denom;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = i;
      rep.analytic_at_worst = ana;
      rep.numeric_at_worst = num;
    }
  }
  return rep;
}

template <typename T>
bool all_finite(const TensorT<T>& t) {
  for (const T v : t.values())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

template class TensorT<float>;
template class TensorT<double>;
template class TapeT<float>;
template class TapeT<double>;

#define CONDFLOW_INSTANTIATE(T)                                                \
  template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);            \
  template TensorT<T> sub<T>(const TensorT<T>&, const TensorT<T>&);            \
  template TensorT<T> mul<T>(const TensorT<T>&, const TensorT<T>&);            \
  template TensorT<T> div<T>(const TensorT<T>&, const TensorT<T>&);            \
  template TensorT<T> add_scalar<T>(const TensorT<T>&, T);                     \
  template TensorT<T> mul_scalar<T>(const TensorT<T>&, T);                     \
  template TensorT<T> neg<T>(const TensorT<T>&);                               \
  template TensorT<T> exp<T>(const TensorT<T>&);                               \
  template TensorT<T> log<T>(const TensorT<T>&);                               \
  template TensorT<T> sqrt<T>(const TensorT<T>&);                              \
  template TensorT<T> tanh<T>(const TensorT<T>&);                              \
  template TensorT<T> relu<T>(const TensorT<T>&);                              \
  template TensorT<T> sigmoid<T>(const TensorT<T>&);                           \
  template TensorT<T> softplus<T>(const TensorT<T>&);                          \
  template TensorT<T> abs<T>(const TensorT<T>&);                               \
  template TensorT<T> clamp_min<T>(const TensorT<T>&, T);                      \
  template TensorT<T> clamp<T>(const TensorT<T>&, T, T);                       \
  template TensorT<T> buggy_scale2<T>(const TensorT<T>&);                      \
  template TensorT<T> sum_axes<T>(const TensorT<T>&, std::vector<int>, bool);  \
  template TensorT<T> sum_all<T>(const TensorT<T>&);                           \
  template TensorT<T> mean_all<T>(const TensorT<T>&);                          \
  template TensorT<T> sum_except_dim0<T>(const TensorT<T>&);                   \
  template TensorT<T> reshape<T>(const TensorT<T>&, Shape);                    \
  template TensorT<T> narrow<T>(const TensorT<T>&, int, std::int64_t,          \
                                std::int64_t);                                 \
  template TensorT<T> concat<T>(const std::vector<TensorT<T>>&, int);          \
  template TensorT<T> squeeze2x2<T>(const TensorT<T>&);                        \
  template TensorT<T> unsqueeze2x2<T>(const TensorT<T>&);                      \
  template TensorT<T> maxpool2x2<T>(const TensorT<T>&);                        \
  template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&, int,     \
                                int, int, int);                                \
  template TensorT<T> logabsdet<T>(const TensorT<T>&, double);                 \
  template GradCheckReport grad_check<T>(                                      \
      const std::function<TensorT<T>(TapeT<T>&, const TensorT<T>&)>&,          \
      const TensorT<T>&, double);                                              \
  template bool all_finite<T>(const TensorT<T>&);

CONDFLOW_INSTANTIATE(float)
CONDFLOW_INSTANTIATE(double)
#undef CONDFLOW_INSTANTIATE

}  // namespace condflow
