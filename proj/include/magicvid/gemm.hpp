#pragma once

#include <cstdint>

#include "magicvid/parallel.hpp"

namespace magicvid {

// C[M,N] += A[M,K] * B[K,N], row-major with explicit leading dimensions.
// i-k-j order keeps the inner loop a contiguous FMA over C and B rows, which
// vectorizes without reassociation; per-element accumulation order is fixed,
// so threaded runs match serial runs bitwise (threads split disjoint C rows).
template <typename T>
void gemm_nn(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda, const T* b, int64_t ldb, T* c,
             int64_t ldc) {
  auto body = [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      const T* arow = a + i * lda;
      T* crow = c + i * ldc;
      for (int64_t p = 0; p < k; ++p) {
        T av = arow[p];
        if (av == T(0)) continue;
        const T* brow = b + p * ldb;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  };
  if (m * n * k > (1 << 16)) {
    parallel_for(m, body);
  } else {
    body(0, m);
  }
}

// C[M,N] += A[M,K] * B^T where B is [N,K]. Dot products over contiguous rows;
// eight explicit accumulators give the compiler a fixed-order reduction it
// can still vectorize.
template <typename T>
void gemm_nt(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda, const T* b, int64_t ldb, T* c,
             int64_t ldc) {
  auto body = [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      const T* arow = a + i * lda;
      T* crow = c + i * ldc;
      for (int64_t j = 0; j < n; ++j) {
        const T* brow = b + j * ldb;
        T acc[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
        int64_t p = 0;
        for (; p + 8 <= k; p += 8) {
          for (int l = 0; l < 8; ++l) acc[l] += arow[p + l] * brow[p + l];
        }
        T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
        for (; p < k; ++p) s += arow[p] * brow[p];
        crow[j] += s;
      }
    }
  };
  if (m * n * k > (1 << 16)) {
    parallel_for(m, body);
  } else {
    body(0, m);
  }
}

// out[j*m + i] = in[i*n + j]; small matrices only (weight transposes).
template <typename T>
void transpose(int64_t m, int64_t n, const T* in, T* out) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
  }
}

}  // namespace magicvid
