// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "condflow/errors.hpp"
#include "condflow/rng.hpp"

namespace condflow {

enum class Dtype { f32, f64 };

template <typename T>
constexpr Dtype dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  if constexpr (std::is_same_v<T, float>) return Dtype::f32;
  return Dtype::f64;
}

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);

template <typename T>
class TapeT;

// Dense row-major tensor. Values are immutable once the tensor participates
// in a tape; mutable_data() is for construction only. Copies are shallow
// (shared storage), consistent with the no-in-place-mutation rule.
template <typename T>
class TensorT {
 public:
  using value_type = T;

  TensorT() = default;

  static TensorT zeros(Shape shape);
  static TensorT full(Shape shape, T value);
  static TensorT from(Shape shape, std::vector<T> values);
  static TensorT scalar(T value) { return full({1}, value); }
  // Adopts existing storage without copying (op plumbing).
  static TensorT of_storage(Shape shape, std::shared_ptr<std::vector<T>> values);
  // i.i.d. N(0, stddev^2) entries.
  static TensorT randn(Shape shape, Rng& rng, T stddev = T(1));

  const Shape& shape() const { return shape_; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  std::int64_t numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  const T* data() const { return data_->data(); }
  const std::vector<T>& values() const { return *data_; }
  std::shared_ptr<std::vector<T>> storage() const { return data_; }

  // Construction-time access. Throws if the tensor is already on a tape.
  T* mutable_data();

  T item() const;
  T at(std::int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

  bool tracked() const { return tape_ != nullptr; }
  TapeT<T>* tape() const { return tape_; }
  int node() const { return node_; }
  bool requires_grad() const { return requires_grad_; }

  Dtype dtype() const { return dtype_of<T>(); }

  // Detached copy of the same storage (drops tape membership, keeps values).
  TensorT<T> detached() const;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  TapeT<T>* tape_ = nullptr;
  int node_ = -1;
  bool requires_grad_ = false;

  friend class TapeT<T>;
};

// Reverse-mode tape. Single-owner: one tape per training step, one backward
// pass per tape. Nodes are recorded in construction order, which is already
// a topological order; backward walks them once in reverse.
template <typename T>
class TapeT {
 public:
  using BackFn = std::function<void(TapeT<T>&)>;
  friend class TensorT<T>;

  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  // Registers `value` as a leaf. The returned handle shares storage with
  // `value`; gradients are retrievable through it after backward().
  TensorT<T> leaf(const TensorT<T>& value, bool requires_grad = true);

  void backward(const TensorT<T>& loss);

  bool has_grad(const TensorT<T>& t) const;
  TensorT<T> grad(const TensorT<T>& t) const;

  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  // --- op-construction interface ---
  TensorT<T> make_node(Shape shape, std::shared_ptr<std::vector<T>> values,
                       std::vector<int> inputs, BackFn back);
  // Installs the back fn of a freshly made node (closures need the node id).
  TensorT<T> make_node_backpatch(const TensorT<T>& t, BackFn back);
  // Gradient buffer for node i; allocated zero-filled on first use.
  std::vector<T>& grad_buf(int i);
  bool grad_allocated(int i) const { return grads_[static_cast<size_t>(i)] != nullptr; }
  const Shape& node_shape(int i) const { return nodes_[static_cast<size_t>(i)].shape; }

 private:
  struct Node {
    Shape shape;
    std::vector<int> inputs;
    BackFn back;
  };
  std::vector<Node> nodes_;
  std::vector<std::unique_ptr<std::vector<T>>> grads_;
  bool backward_done_ = false;
};

using Tensor32 = TensorT<float>;
using Tensor64 = TensorT<double>;
using Tape32 = TapeT<float>;
using Tape64 = TapeT<double>;

// ---------------------------------------------------------------------------
// Elementwise ops. Binary ops broadcast with trailing-dimension alignment:
// shapes are right-aligned, and each pair of extents must be equal or one of
// them must be 1 (which is stretched). The output never drops dimensions.
// ---------------------------------------------------------------------------
Shape broadcast_shape(const Shape& a, const Shape& b);

template <typename T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
// Throws DomainError if any divisor element is exactly zero.
template <typename T> TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b);

template <typename T> TensorT<T> add_scalar(const TensorT<T>& a, T s);
template <typename T> TensorT<T> mul_scalar(const TensorT<T>& a, T s);

template <typename T> TensorT<T> neg(const TensorT<T>& a);
// Throws DomainError on overflow to Inf.
template <typename T> TensorT<T> exp(const TensorT<T>& a);
// Throws DomainError on nonpositive input.
template <typename T> TensorT<T> log(const TensorT<T>& a);
// Throws DomainError on negative input.
template <typename T> TensorT<T> sqrt(const TensorT<T>& a);
template <typename T> TensorT<T> tanh(const TensorT<T>& a);
template <typename T> TensorT<T> relu(const TensorT<T>& a);
template <typename T> TensorT<T> sigmoid(const TensorT<T>& a);
template <typename T> TensorT<T> softplus(const TensorT<T>& a);
template <typename T> TensorT<T> abs(const TensorT<T>& a);
// Gradient is passed through only where the input is strictly inside the
// clamp range.
template <typename T> TensorT<T> clamp_min(const TensorT<T>& a, T lo);
template <typename T> TensorT<T> clamp(const TensorT<T>& a, T lo, T hi);

template <typename T> TensorT<T> operator+(const TensorT<T>& a, const TensorT<T>& b) { return add(a, b); }
template <typename T> TensorT<T> operator-(const TensorT<T>& a, const TensorT<T>& b) { return sub(a, b); }
template <typename T> TensorT<T> operator*(const TensorT<T>& a, const TensorT<T>& b) { return mul(a, b); }
template <typename T> TensorT<T> operator/(const TensorT<T>& a, const TensorT<T>& b) { return div(a, b); }

// ---------------------------------------------------------------------------
// Reductions and shape ops.
// ---------------------------------------------------------------------------
template <typename T> TensorT<T> sum_all(const TensorT<T>& a);       // -> {1}
template <typename T> TensorT<T> mean_all(const TensorT<T>& a);      // -> {1}
// Sum over `axes` (deduplicated, each in range); keepdims keeps extent-1 axes.
template <typename T>
TensorT<T> sum_axes(const TensorT<T>& a, std::vector<int> axes, bool keepdims);
// Sum over all axes except axis 0: the per-batch-item reduction -> {N}.
template <typename T> TensorT<T> sum_except_dim0(const TensorT<T>& a);

template <typename T> TensorT<T> reshape(const TensorT<T>& a, Shape shape);
// Contiguous slice [start, start+len) along `axis`.
template <typename T>
TensorT<T> narrow(const TensorT<T>& a, int axis, std::int64_t start, std::int64_t len);
template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, int axis);

// Space-to-channel: [N,C,H,W] -> [N,4C,H/2,W/2]. Each input channel c maps to
// output channels 4c..4c+3 holding the (top-left, top-right, bottom-left,
// bottom-right) sample of every 2x2 block. Pure permutation; exact inverse.
template <typename T> TensorT<T> squeeze2x2(const TensorT<T>& a);
template <typename T> TensorT<T> unsqueeze2x2(const TensorT<T>& a);

// 2x2 max-pool, stride 2. Ties route the gradient to the first maximum in
// scan order.
template <typename T> TensorT<T> maxpool2x2(const TensorT<T>& a);

// ---------------------------------------------------------------------------
// conv2d: cross-correlation (no kernel flip), NCHW, zero padding.
// input [N,C,H,W] * kernel [O,C,kh,kw] -> [N,O,H',W'] with
// H' = (H + 2*pad_h - kh)/stride_h + 1.
// ---------------------------------------------------------------------------
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& kernel,
                  int pad_h, int pad_w, int stride_h = 1, int stride_w = 1);

// log|det(W)| of a square matrix [C,C] as a {1} tensor, with gradient
// W^{-T}. Throws SingularError below `min_abs_det`.
template <typename T>
TensorT<T> logabsdet(const TensorT<T>& w, double min_abs_det = 1e-12);

// Test fixture: forward multiplies by 2 but the registered gradient claims 3.
// Exists so gradient-check fault injection has a real broken op to detect.
template <typename T> TensorT<T> buggy_scale2(const TensorT<T>& a);

// ---------------------------------------------------------------------------
// Gradient oracle: per-coordinate central finite differences against the
// tape gradient. Relative error uses denominator max(|a|,|b|,1e-12).
// ---------------------------------------------------------------------------
struct GradCheckReport {
  double max_rel_err = 0.0;
  std::int64_t worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool oracle_failed = false;  // f returned NaN during probing
  std::string message;
};

// f receives a tape and the leaf handle for x; it must return a scalar.
template <typename T>
GradCheckReport grad_check(
    const std::function<TensorT<T>(TapeT<T>&, const TensorT<T>&)>& f,
    const TensorT<T>& x, double step = 1e-5);

template <typename T> bool all_finite(const TensorT<T>& t);

}  // namespace condflow
