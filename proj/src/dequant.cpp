// SPDX-License-Identifier: Apache-2.0
#include "condflow/dequant.hpp"

#include <cmath>

namespace condflow {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// log N(e; 0, I) summed per batch item, as an untracked constant.
template <typename T>
TensorT<T> std_normal_logprob_const(const TensorT<T>& e) {
  const std::int64_t n = e.dim(0);
  const std::int64_t per = e.numel() / n;
  auto out = TensorT<T>::zeros({n});
  T* po = out.mutable_data();
  const T* pe = e.data();
  for (std::int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < per; ++j) {
      const double v = static_cast<double>(pe[i * per + j]);
      acc += -0.5 * v * v - 0.5 * kLog2Pi;
    }
    po[i] = static_cast<T>(acc);
  }
  return out;
}

// inverse softplus: u with softplus(u) = s, s > 0
template <typename T>
T softplus_inv(T s) {
  if (s > T(25)) return s;
  return static_cast<T>(std::log(std::expm1(static_cast<double>(s))));
}

}  // namespace

// ---------------------------------------------------------------------------
// UniformDequantizer
// ---------------------------------------------------------------------------

template <typename T>
DequantSample<T> UniformDequantizer<T>::dequantize(const TensorT<T>& y,
                                                   Rng& rng) const {
  const T max_level = static_cast<T>(levels() - 1);
  for (const T v : y.values()) {
    if (v < T(0) || v > max_level || std::floor(static_cast<double>(v)) != static_cast<double>(v))
      throw DomainError("uniform dequantizer: target value " +
                        std::to_string(static_cast<double>(v)) +
                        " not an integer in [0, " +
                        std::to_string(static_cast<double>(max_level)) + "]");
  }
  auto v = TensorT<T>::zeros(y.shape());
  T* pv = v.mutable_data();
  const T* py = y.data();
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    T lift = py[i] + static_cast<T>(rng.uniform());
    // keep the lift strictly inside [y, y+1) even when the addition rounds up
    if (lift >= py[i] + T(1)) lift = std::nextafter(py[i] + T(1), py[i]);
    pv[i] = lift;
  }
  return {v, TensorT<T>::zeros({y.dim(0)}), y};
}

template <typename T>
TensorT<T> UniformDequantizer<T>::requantize(const TensorT<T>& v) const {
  auto y = TensorT<T>::zeros(v.shape());
  T* py = y.mutable_data();
  const T* pv = v.data();
  for (std::int64_t i = 0; i < v.numel(); ++i)
    py[i] = std::floor(pv[i]);
  return y;
}

// ---------------------------------------------------------------------------
// BinaryDequantizer
// ---------------------------------------------------------------------------

template <typename T>
BinaryDequantizer<T>::BinaryDequantizer(Config cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.x_h != cfg.y_h || cfg.x_w != cfg.y_w)
    throw ConfigError("binary dequantizer: conditioning input must share the "
                      "target resolution");
  squeeze_ = cfg.y_h % 2 == 0 && cfg.y_w % 2 == 0 && cfg.y_h >= 2 && cfg.y_w >= 2;
  const std::int64_t op_c = squeeze_ ? 4 * cfg.y_channels : cfg.y_channels;
  const std::int64_t emb_in =
      (squeeze_ ? 4 : 1) * (cfg.y_channels + cfg.x_channels);
  embed_ = SmallConvNet<T>("dequant.embed", static_cast<int>(emb_in), cfg.hidden,
                           cfg.context_channels, rng,
                           /*with_instance_norm=*/false, /*zero_init_out=*/false);
  typename AffineCoupling<T>::Options opt;
  opt.additive = cfg.additive;
  opt.conditional = true;
  opt.context_channels = cfg.context_channels;
  opt.hidden = cfg.hidden;
  opt.scale_alpha = cfg.scale_alpha;
  for (int k = 0; k < 2; ++k) {
    opt.transform_second = (k % 2 == 1);
    const std::string nm = "dequant.flow" + std::to_string(k);
    if (op_c >= 2 && op_c % 2 == 0) {
      couplings_.push_back(
          std::make_unique<AffineCoupling<T>>(nm, static_cast<int>(op_c), opt, rng));
    } else {
      couplings_.push_back(AffineCoupling<T>::degenerate(
          nm, static_cast<int>(op_c), opt, rng));
    }
  }
}

template <typename T>
void BinaryDequantizer<T>::check_binary(const TensorT<T>& y) const {
  for (const T v : y.values())
    if (v != T(0) && v != T(1))
      throw DomainError("binary dequantizer: target contains non-binary value " +
                        std::to_string(static_cast<double>(v)));
}

template <typename T>
Context<T> BinaryDequantizer<T>::make_ctx(const TensorT<T>& y,
                                          const TensorT<T>& x) const {
  auto joint = concat(std::vector<TensorT<T>>{y, x}, 1);
  if (squeeze_) joint = squeeze2x2(joint);
  Context<T> ctx;
  ctx.conditional = true;
  ctx.features[{static_cast<int>(joint.dim(2)), static_cast<int>(joint.dim(3))}] =
      embed_.forward(joint);
  return ctx;
}

template <typename T>
TensorT<T> BinaryDequantizer<T>::lift(const TensorT<T>& y, const TensorT<T>& u) {
  // sign(y - 0.5) as a constant mask (+1 for y=1, -1 for y=0)
  auto sign = TensorT<T>::zeros(y.shape());
  T* ps = sign.mutable_data();
  const T* py = y.data();
  for (std::int64_t i = 0; i < y.numel(); ++i)
    ps[i] = py[i] > T(0.5) ? T(1) : T(-1);
  auto mag = clamp_min(softplus(u), T(1e-6));  // keeps v != 0.5 and logq finite
  return add_scalar(mul(sign, mag), T(0.5));
}

template <typename T>
DequantSample<T> BinaryDequantizer<T>::dequantize(const TensorT<T>& y,
                                                  const TensorT<T>& x,
                                                  Rng& rng) const {
  check_binary(y);
  auto ctx = make_ctx(y, x);
  auto eps = TensorT<T>::randn(y.shape(), rng);
  TensorT<T> e = squeeze_ ? squeeze2x2(eps) : eps;
  TensorT<T> logdet_gen = TensorT<T>::zeros({y.dim(0)});
  for (auto it = couplings_.rbegin(); it != couplings_.rend(); ++it) {
    auto out = (*it)->generate(e, ctx);
    e = out.z;
    logdet_gen = add(logdet_gen, out.logdet);
  }
  TensorT<T> u = squeeze_ ? unsqueeze2x2(e) : e;
  auto v = lift(y, u);
  // logq = log N(eps) - log|du/deps| - sum log sigmoid(u)
  auto log_sig = neg(sum_except_dim0(softplus(neg(u))));
  auto logq = sub(sub(std_normal_logprob_const(eps), logdet_gen), log_sig);
  return {v, logq, y};
}

template <typename T>
TensorT<T> BinaryDequantizer<T>::logq_at(const TensorT<T>& v, const TensorT<T>& y,
                                         const TensorT<T>& x) {
  check_binary(y);
  auto ctx = make_ctx(y, x);
  auto u = TensorT<T>::zeros(v.shape());
  T* pu = u.mutable_data();
  const T* pv = v.data();
  const T* py = y.data();
  for (std::int64_t i = 0; i < v.numel(); ++i) {
    const T mag = py[i] > T(0.5) ? pv[i] - T(0.5) : T(0.5) - pv[i];
    if (mag <= T(0))
      throw DomainError("logq_at: point is outside the lift's support");
    pu[i] = softplus_inv(mag);
  }
  TensorT<T> e = squeeze_ ? squeeze2x2(u) : u;
  TensorT<T> logdet_fwd = TensorT<T>::zeros({v.dim(0)});
  for (auto& cp : couplings_) {
    auto out = cp->forward(e, ctx);
    e = out.z;
    logdet_fwd = add(logdet_fwd, out.logdet);
  }
  auto eps = squeeze_ ? unsqueeze2x2(e) : e;
  auto log_sig = neg(sum_except_dim0(softplus(neg(u))));
  return sub(add(std_normal_logprob_const(eps), logdet_fwd), log_sig);
}

template <typename T>
TensorT<T> BinaryDequantizer<T>::requantize(const TensorT<T>& v) const {
  auto y = TensorT<T>::zeros(v.shape());
  T* py = y.mutable_data();
  const T* pv = v.data();
  for (std::int64_t i = 0; i < v.numel(); ++i)
    py[i] = pv[i] > T(0.5) ? T(1) : T(0);
  return y;
}

template <typename T>
ParamRefs<T> BinaryDequantizer<T>::params() {
  ParamRefs<T> out;
  embed_.collect(out);
  for (auto& c : couplings_) c->collect_params(out);
  return out;
}

template <typename T>
void BinaryDequantizer<T>::bind(TapeT<T>* tape) {
  embed_.bind(tape);
  for (auto& c : couplings_) c->bind(tape);
}

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> elbo_objective(const FlowModel<T>& model, const Context<T>& ctx,
                          const TensorT<T>& y, const UniformDequantizer<T>& dq,
                          Rng& rng) {
  auto ds = dq.dequantize(y, rng);
  return model.log_prob(ds.v, ctx);  // logq == 0 for the unit-density lift
}

template <typename T>
TensorT<T> elbo_objective(const FlowModel<T>& model, const Context<T>& ctx,
                          const TensorT<T>& y, const TensorT<T>& x,
                          const BinaryDequantizer<T>& dq, Rng& rng) {
  auto ds = dq.dequantize(y, x, rng);
  return sub(model.log_prob(ds.v, ctx), ds.logq);
}

#define CONDFLOW_INSTANTIATE(T)                                                \
  template class UniformDequantizer<T>;                                        \
  template class BinaryDequantizer<T>;                                         \
  template TensorT<T> elbo_objective<T>(const FlowModel<T>&, const Context<T>&, \
                                        const TensorT<T>&,                     \
                                        const UniformDequantizer<T>&, Rng&);   \
  template TensorT<T> elbo_objective<T>(const FlowModel<T>&, const Context<T>&, \
                                        const TensorT<T>&, const TensorT<T>&,  \
                                        const BinaryDequantizer<T>&, Rng&);

CONDFLOW_INSTANTIATE(float)
CONDFLOW_INSTANTIATE(double)
#undef CONDFLOW_INSTANTIATE

}  // namespace condflow
