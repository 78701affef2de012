// SPDX-License-Identifier: Apache-2.0
#include "condflow/nets.hpp"

#include <cmath>

namespace condflow {

template <typename T>
TensorT<T> instance_norm(const TensorT<T>& x, T eps) {
  if (x.ndim() != 4)
    throw ShapeError("instance_norm: expected NCHW, got " + shape_str(x.shape()));
  const std::int64_t hw = x.dim(2) * x.dim(3);
  if (hw < 2)
    throw ConfigError("instance_norm: spatial extent must be > 1");
  auto m = mul_scalar(sum_axes(x, {2, 3}, true), T(1) / static_cast<T>(hw));
  auto d = sub(x, m);
  auto var = mul_scalar(sum_axes(mul(d, d), {2, 3}, true), T(1) / static_cast<T>(hw));
  return div(d, sqrt(add_scalar(var, eps)));
}

template <typename T>
Conv2d<T>::Conv2d(const std::string& name, int in_ch, int out_ch, int ksize,
                  Rng& rng, bool zero_init) {
  pad = (ksize - 1) / 2;
  weight.name = name + ".w";
  bias.name = name + ".b";
  if (zero_init) {
    weight.set_value(TensorT<T>::zeros({out_ch, in_ch, ksize, ksize}));
  } else {
    const T stddev = static_cast<T>(std::sqrt(2.0 / (in_ch * ksize * ksize)));
    weight.set_value(TensorT<T>::randn({out_ch, in_ch, ksize, ksize}, rng, stddev));
  }
  bias.set_value(TensorT<T>::zeros({1, out_ch, 1, 1}));
}

template <typename T>
SmallConvNet<T>::SmallConvNet(const std::string& name, int in_ch, int hidden,
                              int out_ch, Rng& rng, bool with_instance_norm,
                              bool zero_init_out)
    : c1(name + ".c1", in_ch, hidden, 3, rng),
      c2(name + ".c2", hidden, out_ch, 3, rng, zero_init_out),
      use_instance_norm(with_instance_norm) {}

template <typename T>
TensorT<T> SmallConvNet<T>::forward(const TensorT<T>& x) const {
  auto h = c1.forward(x);
  if (use_instance_norm) h = instance_norm(h);
  return c2.forward(relu(h));
}

template <typename T>
ContextNet<T>::ContextNet(const std::string& name, int in_ch, int width,
                          std::pair<int, int> in_res,
                          std::vector<std::pair<int, int>> out_res, Rng& rng,
                          bool with_instance_norm)
    : width_(width), instance_norm_(with_instance_norm) {
  stem_ = Conv2d<T>(name + ".stem", in_ch, width, 3, rng);
  auto cur = in_res;
  int idx = 0;
  for (const auto& target : out_res) {
    if (target.first > cur.first || target.second > cur.second)
      throw ConfigError("context resolutions must descend from the input");
    while (cur != target) {
      if (cur.first % 2 != 0 || cur.second % 2 != 0)
        throw ConfigError("context resolution " + std::to_string(cur.first) +
                          "x" + std::to_string(cur.second) + " cannot reach " +
                          std::to_string(target.first) + "x" +
                          std::to_string(target.second));
      cur = {cur.first / 2, cur.second / 2};
      Stage s;
      s.pool = true;
      s.conv = Conv2d<T>(name + ".s" + std::to_string(idx++), width, width, 3, rng);
      s.res = cur;
      stages_.push_back(std::move(s));
    }
    Stage s;
    s.pool = false;
    s.conv = Conv2d<T>(name + ".s" + std::to_string(idx++), width, width, 3, rng);
    s.emit = true;
    s.res = cur;
    stages_.push_back(std::move(s));
  }
}

template <typename T>
std::map<std::pair<int, int>, TensorT<T>> ContextNet<T>::forward(
    const TensorT<T>& x) const {
  std::map<std::pair<int, int>, TensorT<T>> out;
  auto h = stem_.forward(x);
  for (const auto& s : stages_) {
    if (s.pool) h = maxpool2x2(h);
    auto a = h;
    if (instance_norm_ && h.dim(2) * h.dim(3) > 1) a = instance_norm(h);
    h = s.conv.forward(relu(a));
    if (s.emit) out[s.res] = h;
  }
  return out;
}

template <typename T>
void ContextNet<T>::collect(ParamRefs<T>& out) {
  stem_.collect(out);
  for (auto& s : stages_) s.conv.collect(out);
}

template <typename T>
void ContextNet<T>::bind(TapeT<T>* tape) {
  stem_.bind(tape);
  for (auto& s : stages_) s.conv.bind(tape);
}

#define CONDFLOW_INSTANTIATE(T)                               \
  template TensorT<T> instance_norm<T>(const TensorT<T>&, T); \
  template struct Conv2d<T>;                                  \
  template struct SmallConvNet<T>;                            \
  template class ContextNet<T>;

CONDFLOW_INSTANTIATE(float)
CONDFLOW_INSTANTIATE(double)
#undef CONDFLOW_INSTANTIATE

}  // namespace condflow
