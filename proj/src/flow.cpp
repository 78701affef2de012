// SPDX-License-Identifier: Apache-2.0
#include "condflow/flow.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "condflow/linalg.hpp"

namespace condflow {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

template <typename T>
TensorT<T> ones_batch(std::int64_t n) {
  return TensorT<T>::full({n}, T(1));
}

// Broadcasts a {1} scalar to a per-item {N} vector.
template <typename T>
TensorT<T> per_batch(const TensorT<T>& scalar, std::int64_t n) {
  return mul(ones_batch<T>(n), scalar);
}

template <typename T>
void check_finite_or_throw(const TensorT<T>& t, const std::string& layer) {
  if (!all_finite(t))
    throw NumericalError("layer '" + layer + "' produced non-finite values");
}

}  // namespace

// ---------------------------------------------------------------------------
// ActNorm
// ---------------------------------------------------------------------------

template <typename T>
ActNorm<T>::ActNorm(const std::string& name, int channels)
    : channels_(channels) {
  name_ = name;
  scale_.name = name + ".scale";
  bias_.name = name + ".bias";
  scale_.set_value(TensorT<T>::full({1, channels, 1, 1}, T(1)));
  bias_.set_value(TensorT<T>::zeros({1, channels, 1, 1}));
}

template <typename T>
FlowStepOut<T> ActNorm<T>::forward(const TensorT<T>& y, const Context<T>&) {
  for (const T s : scale_.value.values())
    if (std::abs(static_cast<double>(s)) < 1e-12)
      throw SingularError("actnorm '" + name_ + "': zero scale");
  auto z = mul(scale_.node, add(y, bias_.node));
  const T hw = static_cast<T>(y.dim(2) * y.dim(3));
  auto ld = mul_scalar(sum_all(log(abs(scale_.node))), hw);
  return {z, per_batch(ld, y.dim(0))};
}

template <typename T>
TensorT<T> ActNorm<T>::inverse(const TensorT<T>& z, const Context<T>&) const {
  return sub(div(z, scale_.node), bias_.node);
}

template <typename T>
void ActNorm<T>::collect_params(ParamRefs<T>& out) {
  out.push_back(&scale_);
  out.push_back(&bias_);
}

template <typename T>
void ActNorm<T>::bind(TapeT<T>* tape) {
  scale_.bind(tape);
  bias_.bind(tape);
}

template <typename T>
void ActNorm<T>::initialize_from(const TensorT<T>& batch) {
  const std::int64_t N = batch.dim(0), C = batch.dim(1), H = batch.dim(2),
                     W = batch.dim(3);
  const double cnt = static_cast<double>(N * H * W);
  auto s = TensorT<T>::zeros({1, static_cast<std::int64_t>(channels_), 1, 1});
  auto b = TensorT<T>::zeros({1, static_cast<std::int64_t>(channels_), 1, 1});
  T* ps = s.mutable_data();
  T* pb = b.mutable_data();
  const T* p = batch.data();
  for (std::int64_t c = 0; c < C; ++c) {
    double m = 0.0, m2 = 0.0;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t i = 0; i < H * W; ++i) {
        const double v = static_cast<double>(p[(n * C + c) * H * W + i]);
        m += v;
        m2 += v * v;
      }
    m /= cnt;
    const double var = m2 / cnt - m * m;
    pb[c] = static_cast<T>(-m);
    ps[c] = static_cast<T>(1.0 / std::sqrt(std::max(var, 0.0) + 1e-6));
  }
  scale_.set_value(s);
  bias_.set_value(b);
  initialized_ = true;
}

template <typename T>
void ActNorm<T>::set_affine(const std::vector<T>& scale,
                            const std::vector<T>& bias) {
  scale_.set_value(TensorT<T>::from({1, channels_, 1, 1}, scale));
  bias_.set_value(TensorT<T>::from({1, channels_, 1, 1}, bias));
  initialized_ = true;
}

// ---------------------------------------------------------------------------
// InstanceNormFlow
// ---------------------------------------------------------------------------

template <typename T>
InstanceNormFlow<T>::InstanceNormFlow(const std::string& name, int channels,
                                      double momentum)
    : momentum_(momentum), channels_(channels) {
  name_ = name;
  running_mean_.name = name + ".running_mean";
  running_sigma_.name = name + ".running_sigma";
  running_mean_.trainable = false;
  running_sigma_.trainable = false;
  running_mean_.set_value(TensorT<T>::zeros({1, channels, 1, 1}));
  running_sigma_.set_value(TensorT<T>::full({1, channels, 1, 1}, T(1)));
}

template <typename T>
FlowStepOut<T> InstanceNormFlow<T>::forward(const TensorT<T>& y,
                                            const Context<T>& ctx) {
  const std::int64_t N = y.dim(0), C = y.dim(1), H = y.dim(2), W = y.dim(3);
  const T hw = static_cast<T>(H * W);
  if (!ctx.training) {
    auto z = div(sub(y, running_mean_.node), running_sigma_.node);
    double ld = 0.0;
    for (const T s : running_sigma_.value.values())
      ld -= static_cast<double>(hw) * std::log(static_cast<double>(s));
    return {z, TensorT<T>::full({N}, static_cast<T>(ld))};
  }
  // Training: per-instance statistics, applied as affine constants.
  auto mean_t = TensorT<T>::zeros({N, C, 1, 1});
  auto sigma_t = TensorT<T>::zeros({N, C, 1, 1});
  auto ld_t = TensorT<T>::zeros({N});
  T* pm = mean_t.mutable_data();
  T* psig = sigma_t.mutable_data();
  T* pld = ld_t.mutable_data();
  const T* p = y.data();
  for (std::int64_t n = 0; n < N; ++n) {
    double ld = 0.0;
    for (std::int64_t c = 0; c < C; ++c) {
      double m = 0.0, m2 = 0.0;
      for (std::int64_t i = 0; i < H * W; ++i) {
        const double v = static_cast<double>(p[(n * C + c) * H * W + i]);
        m += v;
        m2 += v * v;
      }
      m /= static_cast<double>(H * W);
      const double var = std::max(m2 / static_cast<double>(H * W) - m * m, 0.0);
      const double sig = std::sqrt(var + kEps);
      pm[n * C + c] = static_cast<T>(m);
      psig[n * C + c] = static_cast<T>(sig);
      ld -= static_cast<double>(H * W) * std::log(sig);
    }
    pld[n] = static_cast<T>(ld);
  }
  // EMA update of the running buffers (single trainer owns the model).
  {
    T* rm = running_mean_.value.mutable_data();
    T* rs = running_sigma_.value.mutable_data();
    for (std::int64_t c = 0; c < C; ++c) {
      double bm = 0.0, bs = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        bm += static_cast<double>(pm[n * C + c]);
        bs += static_cast<double>(psig[n * C + c]);
      }
      bm /= static_cast<double>(N);
      bs /= static_cast<double>(N);
      rm[c] = static_cast<T>((1.0 - momentum_) * static_cast<double>(rm[c]) + momentum_ * bm);
      rs[c] = static_cast<T>((1.0 - momentum_) * static_cast<double>(rs[c]) + momentum_ * bs);
    }
  }
  auto z = div(sub(y, mean_t), sigma_t);
  return {z, ld_t};
}

template <typename T>
TensorT<T> InstanceNormFlow<T>::inverse(const TensorT<T>& z,
                                        const Context<T>&) const {
  return add(mul(z, running_sigma_.node), running_mean_.node);
}

template <typename T>
void InstanceNormFlow<T>::collect_params(ParamRefs<T>& out) {
  out.push_back(&running_mean_);
  out.push_back(&running_sigma_);
}

template <typename T>
void InstanceNormFlow<T>::initialize_from(const TensorT<T>& batch) {
  const std::int64_t N = batch.dim(0), C = batch.dim(1), H = batch.dim(2),
                     W = batch.dim(3);
  auto m_t = TensorT<T>::zeros({1, C, 1, 1});
  auto s_t = TensorT<T>::zeros({1, C, 1, 1});
  T* pm = m_t.mutable_data();
  T* ps = s_t.mutable_data();
  const T* p = batch.data();
  const double cnt = static_cast<double>(N * H * W);
  for (std::int64_t c = 0; c < C; ++c) {
    double m = 0.0, m2 = 0.0;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t i = 0; i < H * W; ++i) {
        const double v = static_cast<double>(p[(n * C + c) * H * W + i]);
        m += v;
        m2 += v * v;
      }
    m /= cnt;
    const double var = std::max(m2 / cnt - m * m, 0.0);
    pm[c] = static_cast<T>(m);
    ps[c] = static_cast<T>(std::sqrt(var + kEps));
  }
  running_mean_.set_value(m_t);
  running_sigma_.set_value(s_t);
}

// ---------------------------------------------------------------------------
// InvConv1x1
// ---------------------------------------------------------------------------

template <typename T>
InvConv1x1<T>::InvConv1x1(const std::string& name, int channels, Rng& rng)
    : channels_(channels) {
  name_ = name;
  weight_.name = name + ".weight";
  weight_.set_value(TensorT<T>::from(
      {channels, channels}, linalg::random_orthogonal<T>(channels, rng)));
}

template <typename T>
FlowStepOut<T> InvConv1x1<T>::forward(const TensorT<T>& y, const Context<T>&) {
  const std::int64_t C = channels_;
  auto k = reshape(weight_.node, {C, C, 1, 1});
  auto z = conv2d(y, k, 0, 0);
  TensorT<T> ld;
  try {
    ld = logabsdet(weight_.node);
  } catch (const SingularError& e) {
    throw SingularError("invconv1x1 '" + name_ + "': " + e.what());
  }
  const T hw = static_cast<T>(y.dim(2) * y.dim(3));
  return {z, per_batch(mul_scalar(ld, hw), y.dim(0))};
}

template <typename T>
TensorT<T> InvConv1x1<T>::inverse(const TensorT<T>& z, const Context<T>&) const {
  bool ok = false;
  auto inv = linalg::inverse<T>(weight_.value.values(), channels_, &ok);
  if (!ok)
    throw SingularError("invconv1x1 '" + name_ + "': kernel not invertible");
  const std::int64_t C = channels_;
  auto k = TensorT<T>::from({C, C, 1, 1}, std::move(inv));
  return conv2d(z, k, 0, 0);
}

template <typename T>
void InvConv1x1<T>::collect_params(ParamRefs<T>& out) {
  out.push_back(&weight_);
}

template <typename T>
void InvConv1x1<T>::bind(TapeT<T>* tape) {
  weight_.bind(tape);
}

// ---------------------------------------------------------------------------
// AffineCoupling
// ---------------------------------------------------------------------------

template <typename T>
AffineCoupling<T>::AffineCoupling(const std::string& name, int channels,
                                  const Options& opt, Rng& rng)
    : AffineCoupling(name, channels, (channels + 1) / 2, opt, rng) {
  if (channels % 2 != 0)
    throw ConfigError("coupling '" + name + "': odd channel count " +
                      std::to_string(channels));
}

template <typename T>
std::unique_ptr<AffineCoupling<T>> AffineCoupling<T>::degenerate(
    const std::string& name, int channels, const Options& opt, Rng& rng) {
  if (!opt.conditional)
    throw ConfigError("coupling '" + name +
                      "': degenerate split requires conditioning");
  return std::unique_ptr<AffineCoupling<T>>(
      new AffineCoupling<T>(name, channels, channels, opt, rng));
}

template <typename T>
AffineCoupling<T>::AffineCoupling(const std::string& name, int channels, int c0,
                                  const Options& opt, Rng& rng)
    : opt_(opt), channels_(channels), c0_(c0), c1_(channels - c0) {
  name_ = name;
  const int ctx_ch = opt.conditional ? opt.context_channels : 0;
  const int in_ch = c1_ + ctx_ch;
  if (in_ch <= 0)
    throw ConfigError("coupling '" + name + "': net has no inputs");
  const int out_ch = opt.additive ? c0_ : 2 * c0_;
  net_ = SmallConvNet<T>(name + ".net", in_ch, opt.hidden, out_ch, rng,
                         opt.net_instance_norm, /*zero_init_out=*/true);
}

template <typename T>
std::pair<TensorT<T>, TensorT<T>> AffineCoupling<T>::split(
    const TensorT<T>& in) const {
  if (in.dim(1) != channels_)
    throw ShapeError("coupling '" + name_ + "': expected " +
                     std::to_string(channels_) + " channels, got " +
                     shape_str(in.shape()));
  if (opt_.transform_second)
    return {narrow(in, 1, c1_, c0_), narrow(in, 1, 0, c1_)};
  return {narrow(in, 1, 0, c0_), narrow(in, 1, c0_, c1_)};
}

template <typename T>
TensorT<T> AffineCoupling<T>::join(const TensorT<T>& transformed,
                                   const TensorT<T>& passthrough) const {
  if (c1_ == 0) return transformed;
  if (opt_.transform_second)
    return concat(std::vector<TensorT<T>>{passthrough, transformed}, 1);
  return concat(std::vector<TensorT<T>>{transformed, passthrough}, 1);
}

template <typename T>
typename AffineCoupling<T>::Affine AffineCoupling<T>::net_out(
    const TensorT<T>& passthrough, const Context<T>& ctx) const {
  TensorT<T> nin;
  if (opt_.conditional) {
    const auto& h = ctx.at(passthrough.dim(2), passthrough.dim(3));
    nin = c1_ > 0 ? concat(std::vector<TensorT<T>>{passthrough, h}, 1) : h;
  } else {
    nin = passthrough;
  }
  auto raw = net_.forward(nin);
  Affine a;
  if (opt_.additive) {
    a.t = raw;
    a.has_scale = false;
  } else {
    a.t = narrow(raw, 1, 0, c0_);
    auto sraw = narrow(raw, 1, c0_, c0_);
    a.log_s = mul_scalar(tanh(sraw), static_cast<T>(opt_.scale_alpha));
    a.s = exp(a.log_s);
    a.has_scale = true;
  }
  return a;
}

template <typename T>
FlowStepOut<T> AffineCoupling<T>::forward(const TensorT<T>& y,
                                          const Context<T>& ctx) {
  auto [y0, y1] = split(y);
  auto aff = net_out(y1, ctx);
  TensorT<T> z0, ld;
  if (aff.has_scale) {
    z0 = div(sub(y0, aff.t), aff.s);
    ld = neg(sum_except_dim0(aff.log_s));
  } else {
    z0 = sub(y0, aff.t);
    ld = TensorT<T>::zeros({y.dim(0)});  // volume preserving, exactly zero
  }
  return {join(z0, y1), ld};
}

template <typename T>
TensorT<T> AffineCoupling<T>::inverse(const TensorT<T>& z,
                                      const Context<T>& ctx) const {
  auto [z0, z1] = split(z);
  auto aff = net_out(z1, ctx);
  auto y0 = aff.has_scale ? add(mul(aff.s, z0), aff.t) : add(z0, aff.t);
  return join(y0, z1);
}

template <typename T>
FlowStepOut<T> AffineCoupling<T>::generate(const TensorT<T>& e,
                                           const Context<T>& ctx) const {
  auto [e0, e1] = split(e);
  auto aff = net_out(e1, ctx);
  TensorT<T> u0, ld;
  if (aff.has_scale) {
    u0 = add(mul(aff.s, e0), aff.t);
    ld = sum_except_dim0(aff.log_s);
  } else {
    u0 = add(e0, aff.t);
    ld = TensorT<T>::zeros({e.dim(0)});
  }
  return {join(u0, e1), ld};
}

template <typename T>
void AffineCoupling<T>::collect_params(ParamRefs<T>& out) {
  net_.collect(out);
}

template <typename T>
void AffineCoupling<T>::bind(TapeT<T>* tape) {
  net_.bind(tape);
}

// ---------------------------------------------------------------------------
// SqueezeLayer
// ---------------------------------------------------------------------------

template <typename T>
FlowStepOut<T> SqueezeLayer<T>::forward(const TensorT<T>& y, const Context<T>&) {
  return {squeeze2x2(y), TensorT<T>::zeros({y.dim(0)})};
}

template <typename T>
TensorT<T> SqueezeLayer<T>::inverse(const TensorT<T>& z, const Context<T>&) const {
  return unsqueeze2x2(z);
}

template <typename T>
Shape SqueezeLayer<T>::out_shape(const Shape& in) const {
  return {in[0], in[1] * 4, in[2] / 2, in[3] / 2};
}

// ---------------------------------------------------------------------------
// Priors
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> gaussian_logprob(const TensorT<T>& z, const TensorT<T>& mu,
                            const TensorT<T>& log_sigma) {
  auto u = mul(sub(z, mu), exp(neg(log_sigma)));
  auto term = sub(mul_scalar(mul(u, u), T(-0.5)), log_sigma);
  return sum_except_dim0(add_scalar(term, static_cast<T>(-0.5 * kLog2Pi)));
}

template <typename T>
SplitPrior<T>::SplitPrior(const std::string& name, int channels,
                          bool conditional, int context_channels, int hidden,
                          Rng& rng)
    : name_(name), channels_(channels), conditional_(conditional) {
  if (channels % 2 != 0)
    throw ConfigError("split prior '" + name + "': odd channel count " +
                      std::to_string(channels));
  c0_ = channels / 2;
  c1_ = channels - c0_;
  const int in_ch = c0_ + (conditional ? context_channels : 0);
  net_ = SmallConvNet<T>(name + ".net", in_ch, hidden, 2 * c1_, rng,
                         /*with_instance_norm=*/false, /*zero_init_out=*/true);
}

template <typename T>
std::pair<TensorT<T>, TensorT<T>> SplitPrior<T>::heads(
    const TensorT<T>& z0, const Context<T>& ctx) const {
  TensorT<T> nin = z0;
  if (conditional_) {
    const auto& h = ctx.at(z0.dim(2), z0.dim(3));
    nin = concat(std::vector<TensorT<T>>{z0, h}, 1);
  }
  auto raw = net_.forward(nin);
  return {narrow(raw, 1, 0, c1_), narrow(raw, 1, c1_, c1_)};
}

template <typename T>
FlowStepOut<T> SplitPrior<T>::forward(const TensorT<T>& z,
                                      const Context<T>& ctx) const {
  auto z0 = narrow(z, 1, 0, c0_);
  auto z1 = narrow(z, 1, c0_, c1_);
  auto [mu, ls] = heads(z0, ctx);
  return {z0, gaussian_logprob(z1, mu, ls)};
}

template <typename T>
TensorT<T> SplitPrior<T>::sample_z1(const TensorT<T>& z0, const Context<T>& ctx,
                                    double tau, Rng& rng) const {
  auto [mu, ls] = heads(z0, ctx);
  auto eps = TensorT<T>::randn(mu.shape(), rng);
  return add(mu, mul_scalar(mul(exp(ls), eps), static_cast<T>(tau)));
}

template <typename T>
FinalPrior<T>::FinalPrior(const std::string& name, Shape z_shape,
                          bool conditional, int context_channels, int hidden,
                          Rng& rng)
    : name_(name), z_shape_(std::move(z_shape)), conditional_(conditional) {
  const int C = static_cast<int>(z_shape_[0]);
  if (conditional_) {
    net_ = SmallConvNet<T>(name + ".net", context_channels, hidden, 2 * C, rng,
                           /*with_instance_norm=*/false, /*zero_init_out=*/true);
  } else {
    mu_.name = name + ".mu";
    log_sigma_.name = name + ".log_sigma";
    mu_.set_value(TensorT<T>::zeros({1, C, 1, 1}));
    log_sigma_.set_value(TensorT<T>::zeros({1, C, 1, 1}));
  }
}

template <typename T>
std::pair<TensorT<T>, TensorT<T>> FinalPrior<T>::heads(
    std::int64_t, const Context<T>& ctx) const {
  if (!conditional_) return {mu_.node, log_sigma_.node};
  const auto& h = ctx.at(z_shape_[1], z_shape_[2]);
  auto raw = net_.forward(h);
  const std::int64_t C = z_shape_[0];
  return {narrow(raw, 1, 0, C), narrow(raw, 1, C, C)};
}

template <typename T>
TensorT<T> FinalPrior<T>::logprob(const TensorT<T>& z, const Context<T>& ctx) const {
  auto [mu, ls] = heads(z.dim(0), ctx);
  return gaussian_logprob(z, mu, ls);
}

template <typename T>
TensorT<T> FinalPrior<T>::sample(std::int64_t batch, const Context<T>& ctx,
                                 double tau, Rng& rng) const {
  auto [mu, ls] = heads(batch, ctx);
  auto eps = TensorT<T>::randn({batch, z_shape_[0], z_shape_[1], z_shape_[2]}, rng);
  // mu may be {1,C,1,1} (unconditional); the broadcast stretches it.
  return add(mu, mul_scalar(mul(exp(ls), eps), static_cast<T>(tau)));
}

template <typename T>
void FinalPrior<T>::collect_params(ParamRefs<T>& out) {
  if (conditional_) {
    net_.collect(out);
  } else {
    out.push_back(&mu_);
    out.push_back(&log_sigma_);
  }
}

template <typename T>
void FinalPrior<T>::bind(TapeT<T>* tape) {
  if (conditional_) {
    net_.bind(tape);
  } else {
    mu_.bind(tape);
    log_sigma_.bind(tape);
  }
}

// ---------------------------------------------------------------------------
// FlowConfig
// ---------------------------------------------------------------------------

void FlowConfig::validate() const {
  if (levels < 1) throw ConfigError("levels must be >= 1");
  if (subflows < 0) throw ConfigError("subflows must be >= 0");
  if (y_channels < 1 || y_h < 1 || y_w < 1)
    throw ConfigError("target shape must be positive");
  if (context_channels > 0 && x_channels == 0)
    throw ConfigError("context_channels set but no conditioning input shape");
  if (squeeze) {
    const std::int64_t f = std::int64_t(1) << levels;
    if (y_h % f != 0 || y_w % f != 0)
      throw ConfigError("squeeze pipeline needs spatial extents divisible by " +
                        std::to_string(f));
  }
  std::int64_t c = y_channels;
  for (int l = 0; l < levels; ++l) {
    if (squeeze) c *= 4;
    if (with_coupling && subflows > 0 && c % 2 != 0)
      throw ConfigError("coupling at level " + std::to_string(l) +
                        " sees odd channel count " + std::to_string(c));
    if (l + 1 < levels) {
      if (c % 2 != 0)
        throw ConfigError("split at level " + std::to_string(l) +
                          " sees odd channel count " + std::to_string(c));
      c /= 2;
    }
  }
}

namespace {

std::string kv_line(const std::string& k, const std::string& v) {
  return k + " = " + v + "\n";
}

}  // namespace

std::string flow_config_to_text(const FlowConfig& c) {
  std::ostringstream os;
  os << kv_line("levels", std::to_string(c.levels));
  os << kv_line("subflows", std::to_string(c.subflows));
  os << kv_line("squeeze", c.squeeze ? "true" : "false");
  os << kv_line("coupling", c.coupling == CouplingKind::affine ? "affine" : "additive");
  os << kv_line("norm", c.norm == NormKind::actnorm
                            ? "actnorm"
                            : (c.norm == NormKind::instance_norm ? "instance_norm" : "none"));
  os << kv_line("with_invconv", c.with_invconv ? "true" : "false");
  os << kv_line("with_coupling", c.with_coupling ? "true" : "false");
  os << kv_line("coupling_instance_norm", c.coupling_instance_norm ? "true" : "false");
  os << kv_line("context_instance_norm", c.context_instance_norm ? "true" : "false");
  os << kv_line("coupling_hidden", std::to_string(c.coupling_hidden));
  os << kv_line("prior_hidden", std::to_string(c.prior_hidden));
  os << kv_line("context_channels", std::to_string(c.context_channels));
  os << kv_line("scale_alpha", std::to_string(c.scale_alpha));
  os << kv_line("y_channels", std::to_string(c.y_channels));
  os << kv_line("y_h", std::to_string(c.y_h));
  os << kv_line("y_w", std::to_string(c.y_w));
  os << kv_line("x_channels", std::to_string(c.x_channels));
  os << kv_line("x_h", std::to_string(c.x_h));
  os << kv_line("x_w", std::to_string(c.x_w));
  return os.str();
}

FlowConfig flow_config_from_text(const std::string& text) {
  FlowConfig c;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string k = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    auto b = [&] { return v == "true"; };
    if (k == "levels") c.levels = std::stoi(v);
    else if (k == "subflows") c.subflows = std::stoi(v);
    else if (k == "squeeze") c.squeeze = b();
    else if (k == "coupling") c.coupling = v == "additive" ? CouplingKind::additive : CouplingKind::affine;
    else if (k == "norm") c.norm = v == "actnorm" ? NormKind::actnorm : (v == "instance_norm" ? NormKind::instance_norm : NormKind::none);
    else if (k == "with_invconv") c.with_invconv = b();
    else if (k == "with_coupling") c.with_coupling = b();
    else if (k == "coupling_instance_norm") c.coupling_instance_norm = b();
    else if (k == "context_instance_norm") c.context_instance_norm = b();
    else if (k == "coupling_hidden") c.coupling_hidden = std::stoi(v);
    else if (k == "prior_hidden") c.prior_hidden = std::stoi(v);
    else if (k == "context_channels") c.context_channels = std::stoi(v);
    else if (k == "scale_alpha") c.scale_alpha = std::stod(v);
    else if (k == "y_channels") c.y_channels = std::stoll(v);
    else if (k == "y_h") c.y_h = std::stoll(v);
    else if (k == "y_w") c.y_w = std::stoll(v);
    else if (k == "x_channels") c.x_channels = std::stoll(v);
    else if (k == "x_h") c.x_h = std::stoll(v);
    else if (k == "x_w") c.x_w = std::stoll(v);
    else throw ConfigError("unknown model config key '" + k + "'");
  }
  return c;
}

// ---------------------------------------------------------------------------
// FlowModel
// ---------------------------------------------------------------------------

template <typename T>
FlowModel<T>::FlowModel(FlowConfig cfg, Rng& init_rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::int64_t c = cfg_.y_channels, h = cfg_.y_h, w = cfg_.y_w;
  std::vector<std::pair<int, int>> needed_res;
  auto note_res = [&](std::int64_t rh, std::int64_t rw) {
    const std::pair<int, int> r{static_cast<int>(rh), static_cast<int>(rw)};
    if (needed_res.empty() || needed_res.back() != r) needed_res.push_back(r);
  };
  for (int l = 0; l < cfg_.levels; ++l) {
    const std::string lv = "L" + std::to_string(l);
    if (cfg_.squeeze) {
      layers_.push_back(std::make_unique<SqueezeLayer<T>>(lv + ".squeeze"));
      steps_.push_back({Step::layer, static_cast<int>(layers_.size()) - 1});
      c *= 4;
      h /= 2;
      w /= 2;
    }
    if (cfg_.conditional()) note_res(h, w);
    for (int k = 0; k < cfg_.subflows; ++k) {
      const std::string fk = lv + ".K" + std::to_string(k);
      if (cfg_.norm == NormKind::actnorm) {
        layers_.push_back(std::make_unique<ActNorm<T>>(fk + ".actnorm", static_cast<int>(c)));
        steps_.push_back({Step::layer, static_cast<int>(layers_.size()) - 1});
      } else if (cfg_.norm == NormKind::instance_norm) {
        layers_.push_back(std::make_unique<InstanceNormFlow<T>>(fk + ".instnorm", static_cast<int>(c)));
        steps_.push_back({Step::layer, static_cast<int>(layers_.size()) - 1});
      }
      if (cfg_.with_invconv) {
        layers_.push_back(std::make_unique<InvConv1x1<T>>(fk + ".mix", static_cast<int>(c), init_rng));
        steps_.push_back({Step::layer, static_cast<int>(layers_.size()) - 1});
      }
      if (cfg_.with_coupling) {
        typename AffineCoupling<T>::Options opt;
        opt.additive = cfg_.coupling == CouplingKind::additive;
        opt.conditional = cfg_.conditional();
        opt.context_channels = cfg_.context_channels;
        opt.hidden = cfg_.coupling_hidden;
        opt.net_instance_norm = cfg_.coupling_instance_norm;
        opt.scale_alpha = cfg_.scale_alpha;
        opt.transform_second = (k % 2 == 1);
        layers_.push_back(std::make_unique<AffineCoupling<T>>(
            fk + ".coupling", static_cast<int>(c), opt, init_rng));
        steps_.push_back({Step::layer, static_cast<int>(layers_.size()) - 1});
      }
    }
    if (l + 1 < cfg_.levels) {
      splits_.push_back(std::make_unique<SplitPrior<T>>(
          lv + ".split", static_cast<int>(c), cfg_.conditional(),
          cfg_.context_channels, cfg_.prior_hidden, init_rng));
      steps_.push_back({Step::split, static_cast<int>(splits_.size()) - 1});
      c -= splits_.back()->z1_channels();
    }
  }
  if (cfg_.conditional()) note_res(h, w);
  prior_ = std::make_unique<FinalPrior<T>>(
      "prior", Shape{c, h, w}, cfg_.conditional(), cfg_.context_channels,
      cfg_.prior_hidden, init_rng);
  if (cfg_.conditional()) {
    context_net_ = std::make_unique<ContextNet<T>>(
        "context", static_cast<int>(cfg_.x_channels), cfg_.context_channels,
        std::pair<int, int>{static_cast<int>(cfg_.x_h), static_cast<int>(cfg_.x_w)},
        needed_res, init_rng, cfg_.context_instance_norm);
  }
}

template <typename T>
Context<T> FlowModel<T>::make_context(const TensorT<T>& x, bool training) const {
  Context<T> ctx;
  ctx.training = training;
  if (!cfg_.conditional()) return ctx;
  if (!x.defined())
    throw ConfigError("conditional model requires a conditioning input");
  if (x.ndim() != 4 || x.dim(1) != cfg_.x_channels || x.dim(2) != cfg_.x_h ||
      x.dim(3) != cfg_.x_w)
    throw ShapeError("conditioning input " + shape_str(x.shape()) +
                     " does not match configured shape");
  ctx.conditional = true;
  ctx.raw_x = x;
  ctx.features = context_net_->forward(x);
  return ctx;
}

template <typename T>
TensorT<T> FlowModel<T>::log_prob(const TensorT<T>& y, const Context<T>& ctx) const {
  if (y.ndim() != 4 || y.dim(1) != cfg_.y_channels || y.dim(2) != cfg_.y_h ||
      y.dim(3) != cfg_.y_w)
    throw ShapeError("target " + shape_str(y.shape()) +
                     " does not match configured shape");
  TensorT<T> cur = y;
  TensorT<T> total = TensorT<T>::zeros({y.dim(0)});
  for (const auto& st : steps_) {
    if (st.kind == Step::layer) {
      auto& layer = *layers_[static_cast<size_t>(st.index)];
      auto out = layer.forward(cur, ctx);
      check_finite_or_throw(out.z, layer.name());
      check_finite_or_throw(out.logdet, layer.name());
      cur = out.z;
      total = add(total, out.logdet);
    } else {
      auto& sp = *splits_[static_cast<size_t>(st.index)];
      auto out = sp.forward(cur, ctx);
      check_finite_or_throw(out.logdet, sp.name());
      cur = out.z;
      total = add(total, out.logdet);
    }
  }
  auto lp = prior_->logprob(cur, ctx);
  check_finite_or_throw(lp, "prior");
  return add(total, lp);
}

template <typename T>
TensorT<T> FlowModel<T>::log_prob(const TensorT<T>& y, const TensorT<T>& x) const {
  return log_prob(y, make_context(x, /*training=*/false));
}

template <typename T>
TensorT<T> FlowModel<T>::sample(const TensorT<T>& x, std::int64_t batch,
                                double tau, Rng& rng) const {
  if (tau < 0) throw ConfigError("temperature must be >= 0");
  Context<T> ctx = make_context(x, /*training=*/false);
  if (ctx.conditional) batch = x.dim(0);
  TensorT<T> cur = prior_->sample(batch, ctx, tau, rng);
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
    if (it->kind == Step::split) {
      auto& sp = *splits_[static_cast<size_t>(it->index)];
      auto z1 = sp.sample_z1(cur, ctx, tau, rng);
      cur = concat(std::vector<TensorT<T>>{cur, z1}, 1);
    } else {
      cur = layers_[static_cast<size_t>(it->index)]->inverse(cur, ctx);
    }
  }
  return cur;
}

template <typename T>
typename FlowModel<T>::TransformOut FlowModel<T>::transform(
    const TensorT<T>& y, const Context<T>& ctx) const {
  TransformOut out;
  TensorT<T> cur = y;
  out.logdet = TensorT<T>::zeros({y.dim(0)});
  for (const auto& st : steps_) {
    if (st.kind == Step::layer) {
      auto fo = layers_[static_cast<size_t>(st.index)]->forward(cur, ctx);
      cur = fo.z;
      out.logdet = add(out.logdet, fo.logdet);
    } else {
      auto& sp = *splits_[static_cast<size_t>(st.index)];
      const std::int64_t c1 = sp.z1_channels();
      const std::int64_t c0 = cur.dim(1) - c1;
      out.parts.push_back(narrow(cur, 1, c0, c1));
      cur = narrow(cur, 1, 0, c0);
    }
  }
  out.z = cur;
  return out;
}

template <typename T>
TensorT<T> FlowModel<T>::inverse_transform(const std::vector<TensorT<T>>& parts,
                                           const TensorT<T>& z,
                                           const Context<T>& ctx) const {
  TensorT<T> cur = z;
  int pi = static_cast<int>(parts.size()) - 1;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
    if (it->kind == Step::split) {
      if (pi < 0) throw ShapeError("inverse_transform: missing latent parts");
      cur = concat(std::vector<TensorT<T>>{cur, parts[static_cast<size_t>(pi--)]}, 1);
    } else {
      cur = layers_[static_cast<size_t>(it->index)]->inverse(cur, ctx);
    }
  }
  return cur;
}

template <typename T>
void FlowModel<T>::initialize(const TensorT<T>& y, const TensorT<T>& x) {
  Context<T> ctx = make_context(x, /*training=*/false);
  TensorT<T> cur = y;
  for (const auto& st : steps_) {
    if (st.kind == Step::layer) {
      auto* layer = layers_[static_cast<size_t>(st.index)].get();
      if (auto* an = dynamic_cast<ActNorm<T>*>(layer)) {
        if (!an->initialized()) an->initialize_from(cur);
      } else if (auto* in = dynamic_cast<InstanceNormFlow<T>*>(layer)) {
        in->initialize_from(cur);
      }
      cur = layer->forward(cur, ctx).z;
    } else {
      auto& sp = *splits_[static_cast<size_t>(st.index)];
      cur = narrow(cur, 1, 0, cur.dim(1) - sp.z1_channels());
    }
  }
  initialized_ = true;
}

template <typename T>
ParamRefs<T> FlowModel<T>::params() {
  ParamRefs<T> out;
  for (auto& l : layers_) l->collect_params(out);
  for (auto& s : splits_) s->collect_params(out);
  prior_->collect_params(out);
  if (context_net_) context_net_->collect(out);
  return out;
}

template <typename T>
void FlowModel<T>::bind(TapeT<T>* tape) {
  for (auto& l : layers_) l->bind(tape);
  for (auto& s : splits_) s->bind(tape);
  prior_->bind(tape);
  if (context_net_) context_net_->bind(tape);
}

template <typename T>
std::int64_t FlowModel<T>::trainable_param_count() {
  return param_count(params());
}

template <typename T>
bool FlowModel<T>::volume_preserving() const {
  for (const auto& l : layers_)
    if (!l->volume_preserving()) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Checkpoint format (version 1):
//   line  "CONDFLOW-CKPT-1"
//   line  "CONFIG <byte count>"      followed by that many config bytes
//   line  "PARAMS <count>"
//   per parameter:
//     line "P <name> <ndim> <d0> ... <dk>"
//     raw little-endian f32 payload (numel * 4 bytes)
// Parameters are stored f32 regardless of the compute dtype.
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

template <typename T>
void FlowModel<T>::save(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open checkpoint for writing: " + path);
  const std::string cfg_text = flow_config_to_text(cfg_);
  os << "CONDFLOW-CKPT-1\n";
  os << "CONFIG " << cfg_text.size() << "\n" << cfg_text;
  auto ps = params();
  os << "PARAMS " << ps.size() << "\n";
  for (auto* p : ps) {
    os << "P " << p->name << " " << p->value.ndim();
    for (int i = 0; i < p->value.ndim(); ++i) os << " " << p->value.dim(i);
    os << "\n";
    std::vector<float> buf(static_cast<size_t>(p->value.numel()));
    for (std::int64_t i = 0; i < p->value.numel(); ++i)
      buf[static_cast<size_t>(i)] = static_cast<float>(p->value.at(i));
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!os) throw ConfigError("failed writing checkpoint: " + path);
}

template <typename T>
FlowModel<T> FlowModel<T>::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint: " + path);
  std::string line;
  std::getline(is, line);
  if (line != "CONDFLOW-CKPT-1")
    throw ConfigError("bad checkpoint magic in " + path);
  std::getline(is, line);
  if (line.rfind("CONFIG ", 0) != 0)
    throw ConfigError("bad checkpoint header in " + path);
  const size_t cfg_len = std::stoul(line.substr(7));
  std::string cfg_text(cfg_len, '\0');
  is.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len));
  Rng dummy(0);
  FlowModel<T> model(flow_config_from_text(cfg_text), dummy);
  std::getline(is, line);
  if (line.rfind("PARAMS ", 0) != 0)
    throw ConfigError("bad checkpoint parameter header in " + path);
  const size_t count = std::stoul(line.substr(7));
  std::map<std::string, Param<T>*> by_name;
  for (auto* p : model.params()) by_name[p->name] = p;
  if (count != by_name.size())
    throw ConfigError("checkpoint parameter count mismatch in " + path);
  for (size_t i = 0; i < count; ++i) {
    std::getline(is, line);
    std::istringstream ls(line);
    std::string tag, name;
    int ndim = 0;
    ls >> tag >> name >> ndim;
    if (tag != "P") throw ConfigError("bad parameter record in " + path);
    Shape shape(static_cast<size_t>(ndim));
    for (auto& d : shape) ls >> d;
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw ConfigError("unknown parameter '" + name + "' in " + path);
    if (it->second->value.shape() != shape)
      throw ConfigError("shape mismatch for parameter '" + name + "' in " + path);
    std::vector<float> buf(static_cast<size_t>(shape_numel(shape)));
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!is) throw ConfigError("truncated checkpoint: " + path);
    std::vector<T> vals(buf.size());
    for (size_t j = 0; j < buf.size(); ++j) vals[j] = static_cast<T>(buf[j]);
    it->second->set_value(TensorT<T>::from(shape, std::move(vals)));
  }
  // actnorm affines came from the file; suppress re-initialization
  for (auto& l : model.layers_)
    if (auto* an = dynamic_cast<ActNorm<T>*>(l.get())) an->mark_initialized();
  model.initialized_ = true;
  return model;
}

// ---------------------------------------------------------------------------
// Numerical Jacobian oracle
// ---------------------------------------------------------------------------

NumLogdetReport numerical_logdet_fn(
    const std::function<std::vector<double>(const std::vector<double>&)>& fn,
    const std::vector<double>& y, double step) {
  NumLogdetReport rep;
  const int n = static_cast<int>(y.size());
  if (n > 64) throw ConfigError("numerical_logdet: dimension > 64");
  std::vector<double> jac(static_cast<size_t>(n) * static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) {
    std::vector<double> yp = y, ym = y;
    yp[static_cast<size_t>(j)] += step;
    ym[static_cast<size_t>(j)] -= step;
    const auto fp = fn(yp);
    const auto fm = fn(ym);
    if (static_cast<int>(fp.size()) != n || static_cast<int>(fm.size()) != n) {
      rep.message = "map is not dimension-preserving";
      return rep;
    }
    for (int i = 0; i < n; ++i) {
      const double d = (fp[static_cast<size_t>(i)] - fm[static_cast<size_t>(i)]) / (2.0 * step);
      if (!std::isfinite(d)) {
        rep.message = "non-finite Jacobian entry";
        return rep;
      }
      jac[static_cast<size_t>(i * n + j)] = d;
    }
  }
  bool ok = false;
  const double ld = linalg::log_abs_det(jac, n, &ok);
  if (!ok) {
    rep.message = "numerically singular Jacobian";
    return rep;
  }
  rep.ok = true;
  rep.value = ld;
  return rep;
}

template <typename T>
NumLogdetReport numerical_logdet(FlowLayer<T>& layer, const TensorT<T>& y,
                                 const Context<T>& ctx, double step) {
  const Shape shape = y.shape();
  auto fn = [&](const std::vector<double>& v) {
    std::vector<T> tv(v.size());
    for (size_t i = 0; i < v.size(); ++i) tv[i] = static_cast<T>(v[i]);
    auto out = layer.forward(TensorT<T>::from(shape, std::move(tv)), ctx);
    std::vector<double> res(static_cast<size_t>(out.z.numel()));
    for (std::int64_t i = 0; i < out.z.numel(); ++i)
      res[static_cast<size_t>(i)] = static_cast<double>(out.z.at(i));
    return res;
  };
  std::vector<double> y0(static_cast<size_t>(y.numel()));
  for (std::int64_t i = 0; i < y.numel(); ++i)
    y0[static_cast<size_t>(i)] = static_cast<double>(y.at(i));
  return numerical_logdet_fn(fn, y0, step);
}

template <typename T>
GradCheckReport grad_check_model_param(FlowModel<T>& model, Param<T>* param,
                                       const TensorT<T>& y, const TensorT<T>& x,
                                       double step) {
  std::function<TensorT<T>(TapeT<T>&, const TensorT<T>&)> f =
      [&](TapeT<T>& tape, const TensorT<T>& leaf) {
        model.bind(&tape);
        param->node = leaf;
        auto ctx = model.make_context(x, /*training=*/false);
        return mean_all(model.log_prob(y, ctx));
      };
  auto rep = grad_check<T>(f, param->value, step);
  model.bind(nullptr);
  return rep;
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define CONDFLOW_INSTANTIATE(T)                                               \
  template class ActNorm<T>;                                                  \
  template class InstanceNormFlow<T>;                                         \
  template class InvConv1x1<T>;                                               \
  template class AffineCoupling<T>;                                           \
  template class SqueezeLayer<T>;                                             \
  template class SplitPrior<T>;                                               \
  template class FinalPrior<T>;                                               \
  template class FlowModel<T>;                                                \
  template TensorT<T> gaussian_logprob<T>(const TensorT<T>&, const TensorT<T>&, \
                                          const TensorT<T>&);                 \
  template NumLogdetReport numerical_logdet<T>(FlowLayer<T>&, const TensorT<T>&, \
                                               const Context<T>&, double);     \
  template GradCheckReport grad_check_model_param<T>(                          \
      FlowModel<T>&, Param<T>*, const TensorT<T>&, const TensorT<T>&, double);

CONDFLOW_INSTANTIATE(float)
CONDFLOW_INSTANTIATE(double)
#undef CONDFLOW_INSTANTIATE

}  // namespace condflow
