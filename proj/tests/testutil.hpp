// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "condflow/rng.hpp"
#include "condflow/tensor.hpp"

namespace condflow::testutil {

inline bool near(double a, double b, double tol) { return std::abs(a - b) <= tol; }

// Max absolute elementwise difference; shapes must match.
template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.at(i)) - static_cast<double>(b.at(i))));
  return m;
}

template <typename T>
TensorT<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  TensorT<T> t = TensorT<T>::zeros(std::move(shape));
  T* p = t.mutable_data();
  for (std::int64_t i = 0; i < t.numel(); ++i)
    p[i] = static_cast<T>(rng.normal() * scale);
  return t;
}

}  // namespace condflow::testutil
