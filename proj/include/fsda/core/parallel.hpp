#pragma once

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fsda {

// Thread count control. 0 = library default. Every parallel loop in this
// codebase assigns each output element to exactly one thread, so results are
// bit-identical for any thread count; "serial mode" (1 thread) is only a
// scheduling choice.
inline void set_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace fsda
