#pragma once

#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace lrsa {

// Global cap on kernel-level OpenMP threads. 0 means "OpenMP default".
// Every parallel kernel splits only independent outputs and keeps each
// output's reduction order fixed, so results are bitwise identical for any
// thread count (the determinism contract).
inline int& thread_cap_ref() {
  static int cap = 0;
  return cap;
}

inline void set_max_threads(int n) { thread_cap_ref() = n; }

inline int kernel_threads() {
#ifdef _OPENMP
  if (omp_in_parallel()) return 1;  // no nested parallelism
  int cap = thread_cap_ref();
  int hw = omp_get_max_threads();
  if (cap <= 0 || cap > hw) return hw;
  return cap;
#else
  return 1;
#endif
}

// Work below this many scalar ops is not worth forking threads for.
inline constexpr std::int64_t kParallelGrain = 1 << 16;

}  // namespace lrsa
