// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "condflow/tensor.hpp"

namespace condflow {

// A named parameter. `value` is the master copy owned by the module; `node`
// is the handle used inside forward passes. bind() points `node` at a tape
// leaf for training steps, or back at the raw value for inference.
template <typename T>
struct Param {
  std::string name;
  TensorT<T> value;
  TensorT<T> node;
  bool trainable = true;

  void bind(TapeT<T>* tape) {
    if (tape != nullptr && trainable)
      node = tape->leaf(value);
    else
      node = value.detached();
  }
  void set_value(const TensorT<T>& v) {
    value = v.detached();
    node = value.detached();
  }
};

template <typename T>
using ParamRefs = std::vector<Param<T>*>;

template <typename T>
std::int64_t param_count(const ParamRefs<T>& ps) {
  std::int64_t n = 0;
  for (const auto* p : ps)
    if (p->trainable) n += p->value.numel();
  return n;
}

// Per-sample-and-channel normalization over the spatial extent, as a network
// building block (gradients flow through the statistics).
template <typename T>
TensorT<T> instance_norm(const TensorT<T>& x, T eps = T(1e-5));

// 2-D convolution module with bias.
template <typename T>
struct Conv2d {
  Param<T> weight;  // [O,C,k,k]
  Param<T> bias;    // [1,O,1,1]
  int pad = 0;

  Conv2d() = default;
  // He-style init; zero_init makes the layer start as the zero map.
  Conv2d(const std::string& name, int in_ch, int out_ch, int ksize, Rng& rng,
         bool zero_init = false);

  TensorT<T> forward(const TensorT<T>& x) const {
    return add(conv2d(x, weight.node, pad, pad), bias.node);
  }
  void collect(ParamRefs<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
  void bind(TapeT<T>* tape) {
    weight.bind(tape);
    bias.bind(tape);
  }
};

// conv3x3 -> [instance norm] -> ReLU -> conv3x3(zero-init). The two-layer
// shape used for coupling/prior heads throughout.
template <typename T>
struct SmallConvNet {
  Conv2d<T> c1, c2;
  bool use_instance_norm = false;

  SmallConvNet() = default;
  SmallConvNet(const std::string& name, int in_ch, int hidden, int out_ch,
               Rng& rng, bool with_instance_norm, bool zero_init_out = true);

  TensorT<T> forward(const TensorT<T>& x) const;
  void collect(ParamRefs<T>& out) {
    c1.collect(out);
    c2.collect(out);
  }
  void bind(TapeT<T>* tape) {
    c1.bind(tape);
    c2.bind(tape);
  }
};

// Turns the raw conditioning input into feature maps at every resolution the
// flow needs. Resolutions must descend from the input by factors of two;
// max-pooling bridges the gaps. Blocks follow [norm?, ReLU, conv].
template <typename T>
class ContextNet {
 public:
  ContextNet() = default;
  ContextNet(const std::string& name, int in_ch, int width,
             std::pair<int, int> in_res,
             std::vector<std::pair<int, int>> out_res, Rng& rng,
             bool with_instance_norm);

  // Returns features keyed by (h, w).
  std::map<std::pair<int, int>, TensorT<T>> forward(const TensorT<T>& x) const;

  void collect(ParamRefs<T>& out);
  void bind(TapeT<T>* tape);
  int width() const { return width_; }

 private:
  struct Stage {
    bool pool = false;       // max-pool before the block
    Conv2d<T> conv;          // the block's conv
    bool emit = false;       // record output after this stage
    std::pair<int, int> res; // resolution after this stage
  };
  Conv2d<T> stem_;
  std::vector<Stage> stages_;
  int width_ = 0;
  bool instance_norm_ = false;
};

}  // namespace condflow
