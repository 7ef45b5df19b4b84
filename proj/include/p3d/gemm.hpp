#pragma once

#include <algorithm>
#include <array>
#include <cstdint>

namespace p3d {

// Accumulating GEMM kernels (C += ...) behind the convolution and linear ops.
// Single-threaded by design; determinism comes from the fixed loop order, and
// throughput from giving the compiler clean FMA-able inner loops: four output
// rows share one streamed B row, accumulators live in an L1-resident tile.
// Callers zero C when they want assignment semantics.

namespace detail {
inline constexpr std::int64_t kNTile = 240;  // accumulator tile: 4 rows x 240 cols
}

// C[M,N] += A[M,K] * B[K,N], all row-major with leading dimensions.
template <class T>
void gemm_nn(std::int64_t M, std::int64_t N, std::int64_t K, const T* A,
             std::int64_t lda, const T* B, std::int64_t ldb, T* C, std::int64_t ldc) {
  constexpr std::int64_t NT = detail::kNTile;
  std::array<T, 4 * NT> acc;
  for (std::int64_t n0 = 0; n0 < N; n0 += NT) {
    const std::int64_t nb = std::min(NT, N - n0);
    std::int64_t m0 = 0;
    for (; m0 + 4 <= M; m0 += 4) {
      T* a0 = acc.data();
      T* a1 = acc.data() + NT;
      T* a2 = acc.data() + 2 * NT;
      T* a3 = acc.data() + 3 * NT;
      std::fill(acc.begin(), acc.end(), T(0));
      const T* r0 = A + (m0 + 0) * lda;
      const T* r1 = A + (m0 + 1) * lda;
      const T* r2 = A + (m0 + 2) * lda;
      const T* r3 = A + (m0 + 3) * lda;
      for (std::int64_t k = 0; k < K; ++k) {
        const T* b = B + k * ldb + n0;
        const T v0 = r0[k], v1 = r1[k], v2 = r2[k], v3 = r3[k];
        for (std::int64_t j = 0; j < nb; ++j) {
          const T bj = b[j];
          a0[j] += v0 * bj;
          a1[j] += v1 * bj;
          a2[j] += v2 * bj;
          a3[j] += v3 * bj;
        }
      }
      for (int r = 0; r < 4; ++r) {
        T* c = C + (m0 + r) * ldc + n0;
        const T* a = acc.data() + r * NT;
        for (std::int64_t j = 0; j < nb; ++j) c[j] += a[j];
      }
    }
    for (; m0 < M; ++m0) {
      T* a0 = acc.data();
      std::fill(a0, a0 + nb, T(0));
      const T* r0 = A + m0 * lda;
      for (std::int64_t k = 0; k < K; ++k) {
        const T* b = B + k * ldb + n0;
        const T v0 = r0[k];
        for (std::int64_t j = 0; j < nb; ++j) a0[j] += v0 * b[j];
      }
      T* c = C + m0 * ldc + n0;
      for (std::int64_t j = 0; j < nb; ++j) c[j] += a0[j];
    }
  }
}

// C[M,N] += A^T * B where A is stored [K,M]. Backward pass for activations:
// col_grad = kernel^T * out_grad.
template <class T>
void gemm_tn(std::int64_t M, std::int64_t N, std::int64_t K, const T* A,
             std::int64_t lda, const T* B, std::int64_t ldb, T* C, std::int64_t ldc) {
  constexpr std::int64_t NT = detail::kNTile;
  std::array<T, 4 * NT> acc;
  for (std::int64_t n0 = 0; n0 < N; n0 += NT) {
    const std::int64_t nb = std::min(NT, N - n0);
    std::int64_t m0 = 0;
    for (; m0 + 4 <= M; m0 += 4) {
      T* a0 = acc.data();
      T* a1 = acc.data() + NT;
      T* a2 = acc.data() + 2 * NT;
      T* a3 = acc.data() + 3 * NT;
      std::fill(acc.begin(), acc.end(), T(0));
      for (std::int64_t k = 0; k < K; ++k) {
        const T* arow = A + k * lda + m0;
        const T* b = B + k * ldb + n0;
        const T v0 = arow[0], v1 = arow[1], v2 = arow[2], v3 = arow[3];
        for (std::int64_t j = 0; j < nb; ++j) {
          const T bj = b[j];
          a0[j] += v0 * bj;
          a1[j] += v1 * bj;
          a2[j] += v2 * bj;
          a3[j] += v3 * bj;
        }
      }
      for (int r = 0; r < 4; ++r) {
        T* c = C + (m0 + r) * ldc + n0;
        const T* a = acc.data() + r * NT;
        for (std::int64_t j = 0; j < nb; ++j) c[j] += a[j];
      }
    }
    for (; m0 < M; ++m0) {
      T* a0 = acc.data();
      std::fill(a0, a0 + nb, T(0));
      for (std::int64_t k = 0; k < K; ++k) {
        const T v0 = A[k * lda + m0];
        const T* b = B + k * ldb + n0;
        for (std::int64_t j = 0; j < nb; ++j) a0[j] += v0 * b[j];
      }
      T* c = C + m0 * ldc + n0;
      for (std::int64_t j = 0; j < nb; ++j) c[j] += a0[j];
    }
  }
}

// C[M,N] += A * B^T where B is stored [N,K]. Backward pass for weights:
// kernel_grad = out_grad * col^T. Both operands are K-contiguous dot products;
// the reduction is written as a fixed number of interleaved partial sums so it
// vectorizes without reassociation (no -ffast-math here) while keeping one
// well-defined, reproducible summation order. Four B rows ride along per sweep
// of A so the large col matrix is not re-streamed per output row.
template <class T>
void gemm_nt(std::int64_t M, std::int64_t N, std::int64_t K, const T* A,
             std::int64_t lda, const T* B, std::int64_t ldb, T* C, std::int64_t ldc) {
  constexpr std::int64_t L = sizeof(T) == 4 ? 16 : 8;  // one 512-bit lane group
  const std::int64_t Kv = K - K % L;
  std::int64_t n0 = 0;
  for (; n0 + 4 <= N; n0 += 4) {
    const T* b0 = B + (n0 + 0) * ldb;
    const T* b1 = B + (n0 + 1) * ldb;
    const T* b2 = B + (n0 + 2) * ldb;
    const T* b3 = B + (n0 + 3) * ldb;
    for (std::int64_t m = 0; m < M; ++m) {
      const T* a = A + m * lda;
      T acc0[L] = {}, acc1[L] = {}, acc2[L] = {}, acc3[L] = {};
      for (std::int64_t k = 0; k < Kv; k += L)
        for (std::int64_t l = 0; l < L; ++l) {
          const T av = a[k + l];
          acc0[l] += av * b0[k + l];
          acc1[l] += av * b1[k + l];
          acc2[l] += av * b2[k + l];
          acc3[l] += av * b3[k + l];
        }
      T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      for (std::int64_t l = 0; l < L; ++l) {
        s0 += acc0[l];
        s1 += acc1[l];
        s2 += acc2[l];
        s3 += acc3[l];
      }
      for (std::int64_t k = Kv; k < K; ++k) {
        const T av = a[k];
        s0 += av * b0[k];
        s1 += av * b1[k];
        s2 += av * b2[k];
        s3 += av * b3[k];
      }
      T* c = C + m * ldc + n0;
      c[0] += s0;
      c[1] += s1;
      c[2] += s2;
      c[3] += s3;
    }
  }
  for (; n0 < N; ++n0) {
    const T* b0 = B + n0 * ldb;
    for (std::int64_t m = 0; m < M; ++m) {
      const T* a = A + m * lda;
      T acc[L] = {};
      for (std::int64_t k = 0; k < Kv; k += L)
        for (std::int64_t l = 0; l < L; ++l) acc[l] += a[k + l] * b0[k + l];
      T s0 = 0;
      for (std::int64_t l = 0; l < L; ++l) s0 += acc[l];
      for (std::int64_t k = Kv; k < K; ++k) s0 += a[k] * b0[k];
      C[m * ldc + n0] += s0;
    }
  }
}

}  // namespace p3d
