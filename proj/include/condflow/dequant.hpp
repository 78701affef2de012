// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>

#include "condflow/flow.hpp"
#include "condflow/tensor.hpp"

namespace condflow {

// A stochastic lift of a discrete target into continuous space together with
// the log-density of the lift. requantize(v) must reproduce the original
// target exactly.
template <typename T>
struct DequantSample {
  TensorT<T> v;      // continuous lift
  TensorT<T> logq;   // log q(v | y, x), per batch item {N}
  TensorT<T> y_ref;  // the discrete target the lift came from
};

// v = y + u with u ~ Uniform[0,1)^D; the lift has unit density, so logq = 0
// and the variational objective reduces to log p(v | x).
template <typename T>
class UniformDequantizer {
 public:
  explicit UniformDequantizer(int bits) : bits_(bits) {
    if (bits < 1 || bits > 16) throw ConfigError("uniform dequantizer: bad bit depth");
  }

  DequantSample<T> dequantize(const TensorT<T>& y, Rng& rng) const;
  // floor(v), the indicator quantizer's representative
  TensorT<T> requantize(const TensorT<T>& v) const;
  int bits() const { return bits_; }
  std::int64_t levels() const { return std::int64_t(1) << bits_; }

 private:
  int bits_;
};

// The half-infinite binary lift: v = 0.5 + sign(y - 0.5) * softplus(u) with
// u produced by a small conditional flow from Gaussian noise, conditioned on
// (y, x). Samples land strictly above 0.5 for y = 1 and strictly below for
// y = 0, so the continuous model sees unbounded matched support.
template <typename T>
class BinaryDequantizer {
 public:
  struct Config {
    std::int64_t y_channels = 1, y_h = 1, y_w = 1;
    std::int64_t x_channels = 1, x_h = 1, x_w = 1;  // must share y's resolution
    int context_channels = 8;
    int hidden = 16;
    double scale_alpha = 2.0;
    bool additive = false;  // volume-capable by default
  };

  BinaryDequantizer(Config cfg, Rng& rng);

  DequantSample<T> dequantize(const TensorT<T>& y, const TensorT<T>& x,
                              Rng& rng) const;
  // Density of the lift at an arbitrary v with matching support; used by the
  // normalization and bound oracles.
  TensorT<T> logq_at(const TensorT<T>& v, const TensorT<T>& y,
                     const TensorT<T>& x);
  // threshold at 0.5
  TensorT<T> requantize(const TensorT<T>& v) const;

  ParamRefs<T> params();
  void bind(TapeT<T>* tape);
  const Config& config() const { return cfg_; }

  // The deterministic part of the lift given the post-flow noise u;
  // exposed for the sign-case contract.
  static TensorT<T> lift(const TensorT<T>& y, const TensorT<T>& u);

 private:
  Context<T> make_ctx(const TensorT<T>& y, const TensorT<T>& x) const;
  void check_binary(const TensorT<T>& y) const;

  Config cfg_;
  bool squeeze_ = false;
  SmallConvNet<T> embed_;
  std::vector<std::unique_ptr<AffineCoupling<T>>> couplings_;
};

// Single-sample variational objective log p(v|x) - log q(v|y,x), per batch
// item. Its expectation lower-bounds log P(y|x). The model and dequantizer
// must already be bound to the caller's tape for training use.
template <typename T>
TensorT<T> elbo_objective(const FlowModel<T>& model, const Context<T>& ctx,
                          const TensorT<T>& y, const UniformDequantizer<T>& dq,
                          Rng& rng);

template <typename T>
TensorT<T> elbo_objective(const FlowModel<T>& model, const Context<T>& ctx,
                          const TensorT<T>& y, const TensorT<T>& x,
                          const BinaryDequantizer<T>& dq, Rng& rng);

}  // namespace condflow
