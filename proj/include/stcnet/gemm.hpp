#pragma once

#include <cstdint>

namespace stcnet::nn {

// Row-major C(M,N) = opA(M,K) * opB(K,N), optionally accumulating into C.
// A is stored (M,K) when !ta and (K,M) when ta; B is stored (K,N) when !tb
// and (N,K) when tb. ld* are row strides of the stored matrices.
template <class S>
void gemm(bool ta, bool tb, int64_t M, int64_t N, int64_t K, const S* A, int64_t lda, const S* B,
          int64_t ldb, S* C, int64_t ldc, bool acc) {
  if (!acc)
    for (int64_t i = 0; i < M; ++i)
      for (int64_t j = 0; j < N; ++j) C[i * ldc + j] = S(0);
  if (!ta && !tb) {
    for (int64_t i = 0; i < M; ++i) {
      S* c = C + i * ldc;
      const S* a = A + i * lda;
      for (int64_t k = 0; k < K; ++k) {
        S av = a[k];
        const S* b = B + k * ldb;
        for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  } else if (ta && !tb) {
    for (int64_t k = 0; k < K; ++k) {
      const S* a = A + k * lda;
      const S* b = B + k * ldb;
      for (int64_t i = 0; i < M; ++i) {
        S av = a[i];
        S* c = C + i * ldc;
        for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  } else if (!ta && tb) {
    for (int64_t i = 0; i < M; ++i) {
      const S* a = A + i * lda;
      for (int64_t j = 0; j < N; ++j) {
        const S* b = B + j * ldb;
        S s = S(0);
        for (int64_t k = 0; k < K; ++k) s += a[k] * b[k];
        C[i * ldc + j] += s;
      }
    }
  } else {
    for (int64_t i = 0; i < M; ++i)
      for (int64_t j = 0; j < N; ++j) {
        S s = S(0);
        for (int64_t k = 0; k < K; ++k) s += A[k * lda + i] * B[j * ldb + k];
        C[i * ldc + j] += s;
      }
  }
}

}  // namespace stcnet::nn
