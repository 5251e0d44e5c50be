#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

#include "lrsa/errors.hpp"
#include "lrsa/parallel.hpp"

// Dense kernels shared by the tensor ops. Parallel variants split only
// independent output elements; the reduction order inside each output is
// fixed ascending, so any thread count produces bitwise-identical results.

namespace lrsa::kernels {

using i64 = std::int64_t;

// c[m x n] (+)= a[m x k] * b[k x n]
template <typename T>
void mm_nn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool accumulate) {
  const bool par = m * k * n >= kParallelGrain;
#pragma omp parallel for schedule(static) num_threads(kernel_threads()) if (par)
  for (i64 i = 0; i < m; ++i) {
    T* crow = c + i * n;
    if (!accumulate) {
      for (i64 j = 0; j < n; ++j) crow[j] = T(0);
    }
    const T* arow = a + i * k;
    for (i64 p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] (+)= a[m x k] * b[n x k]^T
template <typename T>
void mm_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool accumulate) {
  const bool par = m * k * n >= kParallelGrain;
#pragma omp parallel for schedule(static) num_threads(kernel_threads()) if (par)
  for (i64 i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (i64 j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (i64 p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

// c[k x n] (+)= a[m x k]^T * b[m x n]
template <typename T>
void mm_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n, bool accumulate) {
  const bool par = m * k * n >= kParallelGrain;
#pragma omp parallel for schedule(static) num_threads(kernel_threads()) if (par)
  for (i64 i = 0; i < k; ++i) {
    T* crow = c + i * n;
    if (!accumulate) {
      for (i64 j = 0; j < n; ++j) crow[j] = T(0);
    }
    for (i64 p = 0; p < m; ++p) {
      const T av = a[p * k + i];
      const T* brow = b + p * n;
      for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Row-wise stabilized softmax. -inf inputs become exact zeros. A row whose
// entries are all -inf trips DegenerateRowError (a fully masked query).
template <typename T>
void softmax_rows(const T* x, T* y, i64 rows, i64 cols) {
  constexpr T kNegInf = -std::numeric_limits<T>::infinity();
  bool degenerate = false;
  const bool par = rows * cols >= kParallelGrain;
#pragma omp parallel for schedule(static) num_threads(kernel_threads()) if (par)
  for (i64 i = 0; i < rows; ++i) {
    const T* xr = x + i * cols;
    T* yr = y + i * cols;
    T mx = kNegInf;
    for (i64 j = 0; j < cols; ++j) mx = xr[j] > mx ? xr[j] : mx;
    if (mx == kNegInf) {
      degenerate = true;  // reported after the loop; flag write is benign
      continue;
    }
    T sum = T(0);
    for (i64 j = 0; j < cols; ++j) {
      const T e = xr[j] == kNegInf ? T(0) : std::exp(xr[j] - mx);
      yr[j] = e;
      sum += e;
    }
    const T inv = T(1) / sum;
    for (i64 j = 0; j < cols; ++j) yr[j] *= inv;
  }
  if (degenerate) throw DegenerateRowError("softmax: slice with every entry masked (-inf)");
}

// Rotary rotation of consecutive channel pairs (2j, 2j+1) by
// angle = position * base^(-2j / d). direction -1 applies the inverse
// rotation (used by the backward pass).
template <typename T>
void rope_rows(const T* x, T* y, i64 rows, i64 d, const i64* positions, double base,
               int direction) {
  const i64 half = d / 2;
  const bool par = rows * d >= kParallelGrain;
#pragma omp parallel for schedule(static) num_threads(kernel_threads()) if (par)
  for (i64 i = 0; i < rows; ++i) {
    const T* xr = x + i * d;
    T* yr = y + i * d;
    const double pos = static_cast<double>(positions[i]);
    for (i64 j = 0; j < half; ++j) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(d));
      const double angle = direction * pos * freq;
      const T c = static_cast<T>(std::cos(angle));
      const T s = static_cast<T>(std::sin(angle));
      const T x0 = xr[2 * j];
      const T x1 = xr[2 * j + 1];
      yr[2 * j] = x0 * c - x1 * s;
      yr[2 * j + 1] = x0 * s + x1 * c;
    }
  }
}

}  // namespace lrsa::kernels
