// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "condflow/nets.hpp"
#include "condflow/tensor.hpp"

namespace condflow {

// Conditioning features at every resolution the flow touches, produced once
// per call from the raw input. `training` selects per-instance statistics in
// normalization layers; frozen/running statistics are used otherwise.
template <typename T>
struct Context {
  std::map<std::pair<int, int>, TensorT<T>> features;
  TensorT<T> raw_x;
  bool conditional = false;
  bool training = false;

  const TensorT<T>& at(std::int64_t h, std::int64_t w) const {
    auto it = features.find({static_cast<int>(h), static_cast<int>(w)});
    if (it == features.end())
      throw ConfigError("no conditioning features at resolution " +
                        std::to_string(h) + "x" + std::to_string(w));
    return it->second;
  }
};

template <typename T>
struct FlowStepOut {
  TensorT<T> z;
  TensorT<T> logdet;  // per batch item, shape {N}
};

// Invertible module contract: inverse(forward(y, ctx), ctx) == y up to dtype
// tolerance, and the reported logdet is log|dz/dy| on the forward path.
template <typename T>
class FlowLayer {
 public:
  virtual ~FlowLayer() = default;
  virtual const std::string& name() const { return name_; }
  virtual FlowStepOut<T> forward(const TensorT<T>& y, const Context<T>& ctx) = 0;
  virtual TensorT<T> inverse(const TensorT<T>& z, const Context<T>& ctx) const = 0;
  virtual void collect_params(ParamRefs<T>&) {}
  virtual void bind(TapeT<T>*) {}
  virtual bool volume_preserving() const { return false; }
  virtual Shape out_shape(const Shape& in) const { return in; }

 protected:
  std::string name_;
};

// z = scale * (y + bias) per channel; logdet = H*W * sum_c log|scale_c|.
// Initialized data-dependently so the first batch leaves each channel with
// zero mean and unit variance.
template <typename T>
class ActNorm final : public FlowLayer<T> {
 public:
  ActNorm(const std::string& name, int channels);

  FlowStepOut<T> forward(const TensorT<T>& y, const Context<T>& ctx) override;
  TensorT<T> inverse(const TensorT<T>& z, const Context<T>& ctx) const override;
  void collect_params(ParamRefs<T>& out) override;
  void bind(TapeT<T>* tape) override;

  bool initialized() const { return initialized_; }
  void initialize_from(const TensorT<T>& batch);
  void set_affine(const std::vector<T>& scale, const std::vector<T>& bias);
  void mark_initialized() { initialized_ = true; }

 private:
  using FlowLayer<T>::name_;
  Param<T> scale_, bias_;
  bool initialized_ = false;
  int channels_ = 0;
};

// Invertible per-instance normalization. In training mode the statistics are
// taken from the current input and treated as data-independent affine
// constants for the log-det (recorded into running buffers via EMA); in
// frozen mode the running statistics are used, making the layer an exact
// affine bijection.
template <typename T>
class InstanceNormFlow final : public FlowLayer<T> {
 public:
  InstanceNormFlow(const std::string& name, int channels, double momentum = 0.1);

  FlowStepOut<T> forward(const TensorT<T>& y, const Context<T>& ctx) override;
  TensorT<T> inverse(const TensorT<T>& z, const Context<T>& ctx) const override;
  void collect_params(ParamRefs<T>& out) override;
  void initialize_from(const TensorT<T>& batch);

 private:
  using FlowLayer<T>::name_;
  Param<T> running_mean_, running_sigma_;  // buffers, [1,C,1,1]
  double momentum_;
  int channels_ = 0;
  static constexpr double kEps = 1e-5;
};

// Per-pixel channel mix z = W y with a square kernel; logdet = H*W*log|det W|.
// The inverse convolves with the explicitly computed W^{-1}.
template <typename T>
class InvConv1x1 final : public FlowLayer<T> {
 public:
  InvConv1x1(const std::string& name, int channels, Rng& rng);

  FlowStepOut<T> forward(const TensorT<T>& y, const Context<T>& ctx) override;
  TensorT<T> inverse(const TensorT<T>& z, const Context<T>& ctx) const override;
  void collect_params(ParamRefs<T>& out) override;
  void bind(TapeT<T>* tape) override;

 private:
  using FlowLayer<T>::name_;
  Param<T> weight_;  // [C,C]
  int channels_ = 0;
};

// Affine coupling over a channel split: the first ceil(C/2) channels are
// transformed as z0 = (y0 - t)/s with (s, t) from a conv net over the
// passthrough half (concatenated with conditioning features when present).
// The scale is s = exp(alpha * tanh(raw)). The additive variant drops the
// scale entirely, so its logdet is identically zero.
template <typename T>
class AffineCoupling final : public FlowLayer<T> {
 public:
  struct Options {
    bool additive = false;        // volume-preserving variant
    bool conditional = false;
    int context_channels = 0;
    int hidden = 32;
    bool net_instance_norm = false;
    double scale_alpha = 2.0;
    bool transform_second = false;  // swap which half is transformed
  };

  // Even channel split. Throws ConfigError on odd channel counts.
  AffineCoupling(const std::string& name, int channels, const Options& opt,
                 Rng& rng);
  // Degenerate split (all channels transformed, conditioning-only net input);
  // used by dequantizers on single-channel noise.
  static std::unique_ptr<AffineCoupling<T>> degenerate(
      const std::string& name, int channels, const Options& opt, Rng& rng);

  FlowStepOut<T> forward(const TensorT<T>& y, const Context<T>& ctx) override;
  TensorT<T> inverse(const TensorT<T>& z, const Context<T>& ctx) const override;
  // Generator direction with on-tape logdet: u = s*e0 + t over the
  // transformed half, logdet = +sum log s. Used by variational dequantizers.
  FlowStepOut<T> generate(const TensorT<T>& e, const Context<T>& ctx) const;

  void collect_params(ParamRefs<T>& out) override;
  void bind(TapeT<T>* tape) override;
  bool volume_preserving() const override { return opt_.additive; }

 private:
  AffineCoupling(const std::string& name, int channels, int c0,
                 const Options& opt, Rng& rng);
  struct Affine {
    TensorT<T> s, t, log_s;
    bool has_scale = false;
  };
  Affine net_out(const TensorT<T>& passthrough, const Context<T>& ctx) const;
  std::pair<TensorT<T>, TensorT<T>> split(const TensorT<T>& in) const;
  TensorT<T> join(const TensorT<T>& transformed, const TensorT<T>& passthrough) const;

  using FlowLayer<T>::name_;
  Options opt_;
  int channels_ = 0, c0_ = 0, c1_ = 0;
  SmallConvNet<T> net_;
};

// Space-to-channel reshuffle; a permutation, so logdet is exactly zero.
template <typename T>
class SqueezeLayer final : public FlowLayer<T> {
 public:
  explicit SqueezeLayer(const std::string& name) { name_ = name; }
  FlowStepOut<T> forward(const TensorT<T>& y, const Context<T>& ctx) override;
  TensorT<T> inverse(const TensorT<T>& z, const Context<T>& ctx) const override;
  bool volume_preserving() const override { return true; }
  Shape out_shape(const Shape& in) const override;

 private:
  using FlowLayer<T>::name_;
};

// log N(z; mu, sigma^2) summed per batch item -> {N}.
template <typename T>
TensorT<T> gaussian_logprob(const TensorT<T>& z, const TensorT<T>& mu,
                            const TensorT<T>& log_sigma);

// Factors out the second channel half and models it with a conditional
// diagonal Gaussian whose parameters come from the continuing half (and the
// conditioning features). Sampling draws z1 ~ N(mu, (tau*sigma)^2).
template <typename T>
class SplitPrior {
 public:
  SplitPrior(const std::string& name, int channels, bool conditional,
             int context_channels, int hidden, Rng& rng);

  // Returns (z0 continuing, log p(z1 | z0, ctx)).
  FlowStepOut<T> forward(const TensorT<T>& z, const Context<T>& ctx) const;
  TensorT<T> sample_z1(const TensorT<T>& z0, const Context<T>& ctx, double tau,
                       Rng& rng) const;
  const std::string& name() const { return name_; }
  void collect_params(ParamRefs<T>& out) { net_.collect(out); }
  void bind(TapeT<T>* tape) { net_.bind(tape); }
  int z1_channels() const { return c1_; }

 private:
  std::pair<TensorT<T>, TensorT<T>> heads(const TensorT<T>& z0,
                                          const Context<T>& ctx) const;
  std::string name_;
  int channels_ = 0, c0_ = 0, c1_ = 0;
  bool conditional_ = false;
  SmallConvNet<T> net_;
};

// Base density over the final latent: diagonal Gaussian with parameters from
// the conditioning features, or learned per-channel constants when
// unconditional.
template <typename T>
class FinalPrior {
 public:
  FinalPrior(const std::string& name, Shape z_shape, bool conditional,
             int context_channels, int hidden, Rng& rng);

  TensorT<T> logprob(const TensorT<T>& z, const Context<T>& ctx) const;
  TensorT<T> sample(std::int64_t batch, const Context<T>& ctx, double tau,
                    Rng& rng) const;
  void collect_params(ParamRefs<T>& out);
  void bind(TapeT<T>* tape);
  const Shape& z_shape() const { return z_shape_; }

 private:
  std::pair<TensorT<T>, TensorT<T>> heads(std::int64_t batch,
                                          const Context<T>& ctx) const;
  std::string name_;
  Shape z_shape_;  // per-item latent shape {C,H,W}
  bool conditional_ = false;
  SmallConvNet<T> net_;
  Param<T> mu_, log_sigma_;  // unconditional path
};

enum class CouplingKind { affine, additive };
enum class NormKind { actnorm, instance_norm, none };

struct FlowConfig {
  int levels = 2;            // L
  int subflows = 2;          // K
  bool squeeze = true;       // squeeze at the start of every level
  CouplingKind coupling = CouplingKind::affine;
  NormKind norm = NormKind::actnorm;
  bool with_invconv = true;
  bool with_coupling = true;
  bool coupling_instance_norm = false;
  bool context_instance_norm = false;
  int coupling_hidden = 32;
  int prior_hidden = 32;
  int context_channels = 0;  // 0 => unconditional model
  double scale_alpha = 2.0;
  // target shape {C,H,W} and raw conditioning shape {C,H,W} ({} if none)
  std::int64_t y_channels = 1, y_h = 1, y_w = 1;
  std::int64_t x_channels = 0, x_h = 0, x_w = 0;

  bool conditional() const { return context_channels > 0 && x_channels > 0; }
  void validate() const;  // throws ConfigError
};

std::string flow_config_to_text(const FlowConfig& c);
FlowConfig flow_config_from_text(const std::string& text);

// The multi-scale conditional flow. Forward direction (density evaluation)
// maps y to latents; log_prob accumulates the prior, every split prior, and
// every layer's log-det. Sampling runs the inverse with temperature applied
// to the final prior and all split priors uniformly.
template <typename T>
class FlowModel {
 public:
  FlowModel(FlowConfig cfg, Rng& init_rng);

  const FlowConfig& config() const { return cfg_; }

  // Conditioning features for input x ({N,Cx,H,W}; pass undefined Tensor for
  // unconditional models).
  Context<T> make_context(const TensorT<T>& x, bool training) const;

  // log p(y | x) per batch item -> {N}. Throws NumericalError naming the
  // first layer that produces a non-finite value.
  TensorT<T> log_prob(const TensorT<T>& y, const Context<T>& ctx) const;
  TensorT<T> log_prob(const TensorT<T>& y, const TensorT<T>& x) const;

  TensorT<T> sample(const TensorT<T>& x, std::int64_t batch, double tau,
                    Rng& rng) const;

  // Bijective part only: all factored latent parts plus the final latent,
  // with the accumulated logdet. Dimension-preserving.
  struct TransformOut {
    std::vector<TensorT<T>> parts;  // split-prior halves in forward order
    TensorT<T> z;                   // final latent
    TensorT<T> logdet;              // {N}
  };
  TransformOut transform(const TensorT<T>& y, const Context<T>& ctx) const;
  TensorT<T> inverse_transform(const std::vector<TensorT<T>>& parts,
                               const TensorT<T>& z, const Context<T>& ctx) const;

  // Data-dependent initialization: actnorm affine parameters and
  // instance-norm running statistics are set from this batch.
  void initialize(const TensorT<T>& y, const TensorT<T>& x);
  bool initialized() const { return initialized_; }

  ParamRefs<T> params();
  void bind(TapeT<T>* tape);
  std::int64_t trainable_param_count();
  bool volume_preserving() const;

  void save(const std::string& path);
  static FlowModel<T> load(const std::string& path);

  // Test/verification access.
  const std::vector<std::unique_ptr<FlowLayer<T>>>& layers() const { return layers_; }
  std::vector<std::unique_ptr<FlowLayer<T>>>& layers() { return layers_; }
  FinalPrior<T>& prior() { return *prior_; }

 private:
  struct Step {
    enum Kind { layer, split } kind;
    int index;
  };
  FlowConfig cfg_;
  std::unique_ptr<ContextNet<T>> context_net_;
  std::vector<std::unique_ptr<FlowLayer<T>>> layers_;
  std::vector<std::unique_ptr<SplitPrior<T>>> splits_;
  std::unique_ptr<FinalPrior<T>> prior_;
  std::vector<Step> steps_;
  bool initialized_ = false;
};

// Numerical Jacobian oracle: builds the full Jacobian of `fn` at y by central
// differences and returns log|det|. For small dimensions only.
struct NumLogdetReport {
  bool ok = false;
  double value = 0.0;
  std::string message;
};

NumLogdetReport numerical_logdet_fn(
    const std::function<std::vector<double>(const std::vector<double>&)>& fn,
    const std::vector<double>& y, double step = 1e-5);

template <typename T>
NumLogdetReport numerical_logdet(FlowLayer<T>& layer, const TensorT<T>& y,
                                 const Context<T>& ctx, double step = 1e-5);

// Finite-difference check of d mean(log p(y|x)) / d(param) for one parameter
// tensor of the model. Leaves the model unbound on return.
template <typename T>
GradCheckReport grad_check_model_param(FlowModel<T>& model, Param<T>* param,
                                       const TensorT<T>& y, const TensorT<T>& x,
                                       double step = 1e-5);

}  // namespace condflow
