#pragma once

#include <cstdint>

namespace mtspeech {

// C[MxN] = alpha * op(A) * op(B) + beta * C over contiguous row-major
// buffers. Loop orders are chosen so the inner loop is a unit-stride run
// that the compiler can vectorize.
template <typename Real>
void gemm(bool trans_a, bool trans_b, int64_t M, int64_t N, int64_t K, Real alpha,
          const Real* A, const Real* B, Real beta, Real* C) {
  if (beta == Real(0)) {
    for (int64_t i = 0; i < M * N; ++i) C[i] = Real(0);
  } else if (beta != Real(1)) {
    for (int64_t i = 0; i < M * N; ++i) C[i] *= beta;
  }
  if (!trans_a && !trans_b) {
    // A[M,K] * B[K,N]
    for (int64_t m = 0; m < M; ++m) {
      Real* c = C + m * N;
      const Real* a = A + m * K;
      for (int64_t k = 0; k < K; ++k) {
        const Real am = alpha * a[k];
        const Real* b = B + k * N;
        for (int64_t n = 0; n < N; ++n) c[n] += am * b[n];
      }
    }
  } else if (!trans_a && trans_b) {
    // A[M,K] * B[N,K]^T
    for (int64_t m = 0; m < M; ++m) {
      const Real* a = A + m * K;
      Real* c = C + m * N;
      for (int64_t n = 0; n < N; ++n) {
        const Real* b = B + n * K;
        Real acc = Real(0);
        for (int64_t k = 0; k < K; ++k) acc += a[k] * b[k];
        c[n] += alpha * acc;
      }
    }
  } else if (trans_a && !trans_b) {
    // A[K,M]^T * B[K,N]
    for (int64_t k = 0; k < K; ++k) {
      const Real* a = A + k * M;
      const Real* b = B + k * N;
      for (int64_t m = 0; m < M; ++m) {
        const Real am = alpha * a[m];
        Real* c = C + m * N;
        for (int64_t n = 0; n < N; ++n) c[n] += am * b[n];
      }
    }
  } else {
    // A[K,M]^T * B[N,K]^T
    for (int64_t m = 0; m < M; ++m) {
      Real* c = C + m * N;
      for (int64_t n = 0; n < N; ++n) {
        const Real* b = B + n * K;
        Real acc = Real(0);
        for (int64_t k = 0; k < K; ++k) acc += A[k * M + m] * b[k];
        c[n] += alpha * acc;
      }
    }
  }
}

}  // namespace mtspeech
