#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

// Serial reference kernels: textbook loops, no threading, no blocking.
// They are the ground truth the production kernels are tested against and
// the baseline of the kernel benchmark. Keep them boring.

namespace lrsa::ref {

using i64 = std::int64_t;

template <typename T>
void mm_nn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
  for (i64 i = 0; i < m; ++i) {
    for (i64 j = 0; j < n; ++j) {
      T acc = T(0);
      for (i64 p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

template <typename T>
void mm_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
  for (i64 i = 0; i < m; ++i) {
    for (i64 j = 0; j < n; ++j) {
      T acc = T(0);
      for (i64 p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      c[i * n + j] = acc;
    }
  }
}

template <typename T>
void mm_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
  for (i64 i = 0; i < k; ++i) {
    for (i64 j = 0; j < n; ++j) {
      T acc = T(0);
      for (i64 p = 0; p < m; ++p) acc += a[p * k + i] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

template <typename T>
void softmax_rows(const T* x, T* y, i64 rows, i64 cols) {
  constexpr T kNegInf = -std::numeric_limits<T>::infinity();
  for (i64 i = 0; i < rows; ++i) {
    T mx = kNegInf;
    for (i64 j = 0; j < cols; ++j) mx = std::max(mx, x[i * cols + j]);
    T sum = T(0);
    for (i64 j = 0; j < cols; ++j) {
      const T v = x[i * cols + j];
      y[i * cols + j] = v == kNegInf ? T(0) : std::exp(v - mx);
      sum += y[i * cols + j];
    }
    for (i64 j = 0; j < cols; ++j) y[i * cols + j] /= sum;
  }
}

}  // namespace lrsa::ref
