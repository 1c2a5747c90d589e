#pragma once

#include <cblas.h>

#include <cstdlib>
#include <string>

#include "vssd/core/tensor.hpp"

namespace vssd {

/// Thread count for BLAS and any internal parallel loops. Read once from
/// VSSD_NUM_THREADS (default 1, which is also what the test suites pin).
inline int configured_threads() {
  static const int n = [] {
    const char* env = std::getenv("VSSD_NUM_THREADS");
    int v = env ? std::atoi(env) : 1;
    return v > 0 ? v : 1;
  }();
  return n;
}

/// Row-major C = alpha * op(A) * op(B) + beta * C, dispatched to BLAS by scalar type.
template <Real T>
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
                 const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
                 std::size_t ldc) {
  static const bool threads_configured = (openblas_set_num_threads(configured_threads()), true);
  (void)threads_configured;
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] = beta == T(0) ? T(0) : beta * c[i * ldc + j];
    return;
  }
  const auto ta = trans_a ? CblasTrans : CblasNoTrans;
  const auto tb = trans_b ? CblasTrans : CblasNoTrans;
  const auto M = static_cast<blasint>(m), N = static_cast<blasint>(n), K = static_cast<blasint>(k);
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, ta, tb, M, N, K, alpha, a, static_cast<blasint>(lda), b,
                static_cast<blasint>(ldb), beta, c, static_cast<blasint>(ldc));
  } else {
    cblas_dgemm(CblasRowMajor, ta, tb, M, N, K, alpha, a, static_cast<blasint>(lda), b,
                static_cast<blasint>(ldb), beta, c, static_cast<blasint>(ldc));
  }
}

inline void apply_thread_config() { openblas_set_num_threads(configured_threads()); }

}  // namespace vssd
