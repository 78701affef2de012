// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace condflow::linalg {

// LU factorization with partial pivoting of a dense row-major n x n matrix.
// Small fixed sizes only (channel-mix kernels, numerical Jacobians).
template <typename T>
struct LuResult {
  std::vector<T> lu;        // packed L (unit diagonal) and U
  std::vector<int> pivots;  // row swaps applied at each step
  int n = 0;
  double log_abs_det = 0.0;
  double sign = 1.0;
  bool ok = false;  // false if a pivot vanished (singular)
};

template <typename T>
LuResult<T> lu_factor(const std::vector<T>& a, int n) {
  LuResult<T> r;
  r.lu = a;
  r.n = n;
  r.pivots.resize(static_cast<size_t>(n));
  r.sign = 1.0;
  double logdet = 0.0;
  auto at = [&](int i, int j) -> T& { return r.lu[static_cast<size_t>(i * n + j)]; };
  for (int k = 0; k < n; ++k) {
    int p = k;
    T pmax = std::abs(at(k, k));
    for (int i = k + 1; i < n; ++i)
      if (std::abs(at(i, k)) > pmax) {
        pmax = std::abs(at(i, k));
        p = i;
      }
    r.pivots[static_cast<size_t>(k)] = p;
    if (pmax == T(0)) {
      r.ok = false;
      r.log_abs_det = -std::numeric_limits<double>::infinity();
      return r;
    }
    if (p != k) {
      for (int j = 0; j < n; ++j) std::swap(at(k, j), at(p, j));
      r.sign = -r.sign;
    }
    const T piv = at(k, k);
    if (piv < T(0)) r.sign = -r.sign;
    logdet += std::log(std::abs(static_cast<double>(piv)));
    for (int i = k + 1; i < n; ++i) {
      const T m = at(i, k) / piv;
      at(i, k) = m;
      for (int j = k + 1; j < n; ++j) at(i, j) -= m * at(k, j);
    }
  }
  r.log_abs_det = logdet;
  r.ok = true;
  return r;
}

// Solves A x = b in place given the factorization.
template <typename T>
void lu_solve(const LuResult<T>& f, std::vector<T>& b) {
  const int n = f.n;
  auto at = [&](int i, int j) -> T {
    return f.lu[static_cast<size_t>(i * n + j)];
  };
  // Apply the full row permutation first (the stored L rows are already in
  // the fully pivoted frame), then substitute.
  for (int k = 0; k < n; ++k) {
    const int p = f.pivots[static_cast<size_t>(k)];
    if (p != k) std::swap(b[static_cast<size_t>(k)], b[static_cast<size_t>(p)]);
  }
  for (int k = 0; k < n; ++k)
    for (int i = k + 1; i < n; ++i)
      b[static_cast<size_t>(i)] -= at(i, k) * b[static_cast<size_t>(k)];
  for (int i = n - 1; i >= 0; --i) {
    for (int j = i + 1; j < n; ++j)
      b[static_cast<size_t>(i)] -= at(i, j) * b[static_cast<size_t>(j)];
    b[static_cast<size_t>(i)] /= at(i, i);
  }
}

template <typename T>
std::vector<T> lu_inverse(const LuResult<T>& f) {
  const int n = f.n;
  std::vector<T> inv(static_cast<size_t>(n * n), T(0));
  std::vector<T> col(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) {
    std::fill(col.begin(), col.end(), T(0));
    col[static_cast<size_t>(j)] = T(1);
    lu_solve(f, col);
    for (int i = 0; i < n; ++i) inv[static_cast<size_t>(i * n + j)] = col[static_cast<size_t>(i)];
  }
  return inv;
}

template <typename T>
std::vector<T> inverse(const std::vector<T>& a, int n, bool* ok = nullptr) {
  auto f = lu_factor(a, n);
  if (ok) *ok = f.ok;
  if (!f.ok) return std::vector<T>(static_cast<size_t>(n * n), T(0));
  return lu_inverse(f);
}

// log|det A| via LU; ok=false when singular.
template <typename T>
double log_abs_det(const std::vector<T>& a, int n, bool* ok = nullptr) {
  auto f = lu_factor(a, n);
  if (ok) *ok = f.ok;
  return f.log_abs_det;
}

// Random orthogonal matrix: Gram-Schmidt on a Gaussian matrix, with a
// re-orthogonalization pass for numerical hygiene.
template <typename T, typename RngT>
std::vector<T> random_orthogonal(int n, RngT& rng) {
  std::vector<T> m(static_cast<size_t>(n * n));
  for (auto& v : m) v = static_cast<T>(rng.normal());
  auto col = [&](int j, int i) -> T& { return m[static_cast<size_t>(i * n + j)]; };
  for (int pass = 0; pass < 2; ++pass) {
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < j; ++k) {
        T dot = 0;
        for (int i = 0; i < n; ++i) dot += col(k, i) * col(j, i);
        for (int i = 0; i < n; ++i) col(j, i) -= dot * col(k, i);
      }
      T norm = 0;
      for (int i = 0; i < n; ++i) norm += col(j, i) * col(j, i);
      norm = std::sqrt(norm);
      for (int i = 0; i < n; ++i) col(j, i) /= norm;
    }
  }
  return m;
}

}  // namespace condflow::linalg
