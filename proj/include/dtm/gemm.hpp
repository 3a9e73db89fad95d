#pragma once

#include <algorithm>
#include <cstddef>
#include <type_traits>
#include <vector>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define DTM_GEMM_AVX2 1
#endif

// Small row-major matrix kernels sized for this pipeline's convolutions
// (M up to ~64, K up to ~600, N up to a few thousand). The AVX2 paths keep a
// 4 x 16 (float) or 4 x 8 (double) tile of C in eight vector accumulators for
// the whole contraction, so each loaded B vector feeds four fused
// multiply-adds; per-element accumulation order still matches the scalar
// fallback, k ascending. Dot-product kernels (gemm_nt) reduce eight-lane
// partial sums at the end instead.
//
// The `Add` flag selects between C += A*B and C = A*B. The overwrite form
// exists so callers that fully recompute C every call can skip zeroing it
// first; both forms contract k in the same order, so for a zeroed C they
// produce bitwise-identical results.

namespace dtm::detail {

/// C(M x N) += A(M x K) * B(K x N)
template <typename T>
void gemm_nn_generic(T* C, const T* A, const T* B, int M, int N, int K) {
  for (int i = 0; i < M; ++i) {
    const T* a = A + static_cast<std::size_t>(i) * K;
    T* c = C + static_cast<std::size_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      const T av = a[k];
      const T* b = B + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

/// C(M x N) += A(M x K) * B^T, with B stored (N x K).
template <typename T>
void gemm_nt_generic(T* C, const T* A, const T* B, int M, int N, int K) {
  for (int i = 0; i < M; ++i) {
    const T* a = A + static_cast<std::size_t>(i) * K;
    T* c = C + static_cast<std::size_t>(i) * N;
    for (int j = 0; j < N; ++j) {
      const T* b = B + static_cast<std::size_t>(j) * K;
      T s = 0;
      for (int k = 0; k < K; ++k) s += a[k] * b[k];
      c[j] += s;
    }
  }
}

/// C(M x N) += A^T * B, with A stored (K x M) and B stored (K x N).
template <bool Add = true, typename T>
void gemm_tn_generic(T* C, const T* A, const T* B, int M, int N, int K) {
  if constexpr (!Add) std::fill_n(C, static_cast<std::size_t>(M) * N, T(0));
  for (int k = 0; k < K; ++k) {
    const T* a = A + static_cast<std::size_t>(k) * M;
    const T* b = B + static_cast<std::size_t>(k) * N;
    for (int i = 0; i < M; ++i) {
      const T av = a[i];
      T* c = C + static_cast<std::size_t>(i) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

#ifdef DTM_GEMM_AVX2

// Shared 4-row broadcast/FMA tile. `AStep` yields the address of the scalar
// A(row r, step k) for the current tile.

template <bool Add, typename AAt>
inline void tile4x16_f32(float* C, int ldc, const float* B, int ldb, int j, int K, const AAt& a_at) {
  __m256 acc[4][2];
  for (int r = 0; r < 4; ++r) acc[r][0] = acc[r][1] = _mm256_setzero_ps();
  for (int k = 0; k < K; ++k) {
    const float* b = B + static_cast<std::size_t>(k) * ldb + j;
    const __m256 b0 = _mm256_loadu_ps(b);
    const __m256 b1 = _mm256_loadu_ps(b + 8);
    for (int r = 0; r < 4; ++r) {
      const __m256 av = _mm256_set1_ps(a_at(r, k));
      acc[r][0] = _mm256_fmadd_ps(av, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_ps(av, b1, acc[r][1]);
    }
  }
  for (int r = 0; r < 4; ++r) {
    float* c = C + static_cast<std::size_t>(r) * ldc + j;
    if constexpr (Add) {
      _mm256_storeu_ps(c, _mm256_add_ps(_mm256_loadu_ps(c), acc[r][0]));
      _mm256_storeu_ps(c + 8, _mm256_add_ps(_mm256_loadu_ps(c + 8), acc[r][1]));
    } else {
      _mm256_storeu_ps(c, acc[r][0]);
      _mm256_storeu_ps(c + 8, acc[r][1]);
    }
  }
}

template <bool Add, typename AAt>
inline void tile4x8_f64(double* C, int ldc, const double* B, int ldb, int j, int K, const AAt& a_at) {
  __m256d acc[4][2];
  for (int r = 0; r < 4; ++r) acc[r][0] = acc[r][1] = _mm256_setzero_pd();
  for (int k = 0; k < K; ++k) {
    const double* b = B + static_cast<std::size_t>(k) * ldb + j;
    const __m256d b0 = _mm256_loadu_pd(b);
    const __m256d b1 = _mm256_loadu_pd(b + 4);
    for (int r = 0; r < 4; ++r) {
      const __m256d av = _mm256_set1_pd(a_at(r, k));
      acc[r][0] = _mm256_fmadd_pd(av, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_pd(av, b1, acc[r][1]);
    }
  }
  for (int r = 0; r < 4; ++r) {
    double* c = C + static_cast<std::size_t>(r) * ldc + j;
    if constexpr (Add) {
      _mm256_storeu_pd(c, _mm256_add_pd(_mm256_loadu_pd(c), acc[r][0]));
      _mm256_storeu_pd(c + 4, _mm256_add_pd(_mm256_loadu_pd(c + 4), acc[r][1]));
    } else {
      _mm256_storeu_pd(c, acc[r][0]);
      _mm256_storeu_pd(c + 4, acc[r][1]);
    }
  }
}

inline float hsum256(__m256 v) {
  const __m128 lo = _mm256_castps256_ps128(v);
  const __m128 hi = _mm256_extractf128_ps(v, 1);
  __m128 s = _mm_add_ps(lo, hi);
  s = _mm_add_ps(s, _mm_movehl_ps(s, s));
  s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
  return _mm_cvtss_f32(s);
}

inline double hsum256d(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(s) + _mm_cvtsd_f64(_mm_unpackhi_pd(s, s));
}

#endif  // DTM_GEMM_AVX2

#ifdef DTM_GEMM_AVX2

// Broadcast-kernel driver shared by gemm_nn and gemm_tn. Copies each NR-wide
// B panel into a contiguous scratch block first: B's row stride in this
// pipeline is often a multiple of 4 KiB, where the panel's rows would all
// collide in the same L1 set. `a_scalar(i, k)` reads the A element for
// output row i and contraction step k.
template <bool Add, typename T, typename AAt>
void gemm_broadcast_packed(T* C, const T* B, int M, int N, int K, const AAt& a_scalar) {
  constexpr int NR = std::is_same_v<T, float> ? 16 : 8;
  std::vector<T> panel(static_cast<std::size_t>(K) * NR);
  int j = 0;
  for (; j + NR <= N; j += NR) {
    for (int k = 0; k < K; ++k) {
      const T* src = B + static_cast<std::size_t>(k) * N + j;
      T* dst = panel.data() + static_cast<std::size_t>(k) * NR;
      for (int q = 0; q < NR; ++q) dst[q] = src[q];
    }
    int i = 0;
    for (; i + 4 <= M; i += 4) {
      const auto a_at = [&a_scalar, i](int r, int k) { return a_scalar(i + r, k); };
      if constexpr (std::is_same_v<T, float>)
        tile4x16_f32<Add>(C + static_cast<std::size_t>(i) * N + j, N, panel.data(), NR, 0, K, a_at);
      else
        tile4x8_f64<Add>(C + static_cast<std::size_t>(i) * N + j, N, panel.data(), NR, 0, K, a_at);
    }
    for (; i < M; ++i) {
      T* c = C + static_cast<std::size_t>(i) * N + j;
      if constexpr (!Add)
        for (int q = 0; q < NR; ++q) c[q] = T(0);
      for (int k = 0; k < K; ++k) {
        const T av = a_scalar(i, k);
        const T* b = panel.data() + static_cast<std::size_t>(k) * NR;
        for (int q = 0; q < NR; ++q) c[q] += av * b[q];
      }
    }
  }
  for (; j < N; ++j) {
    for (int i = 0; i < M; ++i) {
      T acc = 0;
      for (int k = 0; k < K; ++k) acc += a_scalar(i, k) * B[static_cast<std::size_t>(k) * N + j];
      T& c = C[static_cast<std::size_t>(i) * N + j];
      if constexpr (Add)
        c += acc;
      else
        c = acc;
    }
  }
}

#endif  // DTM_GEMM_AVX2

template <typename T>
void gemm_nn(T* C, const T* A, const T* B, int M, int N, int K) {
#ifdef DTM_GEMM_AVX2
  if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
    gemm_broadcast_packed<true>(C, B, M, N, K,
                                [A, K](int i, int k) { return A[static_cast<std::size_t>(i) * K + k]; });
    return;
  }
#endif
  gemm_nn_generic(C, A, B, M, N, K);
}

template <typename T>
void gemm_tn(T* C, const T* A, const T* B, int M, int N, int K) {
#ifdef DTM_GEMM_AVX2
  if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
    gemm_broadcast_packed<true>(C, B, M, N, K,
                                [A, M](int i, int k) { return A[static_cast<std::size_t>(k) * M + i]; });
    return;
  }
#endif
  gemm_tn_generic(C, A, B, M, N, K);
}

/// Overwrite form of gemm_tn: C = A^T * B.
template <typename T>
void gemm_tn_set(T* C, const T* A, const T* B, int M, int N, int K) {
#ifdef DTM_GEMM_AVX2
  if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
    gemm_broadcast_packed<false>(C, B, M, N, K,
                                 [A, M](int i, int k) { return A[static_cast<std::size_t>(k) * M + i]; });
    return;
  }
#endif
  gemm_tn_generic<false>(C, A, B, M, N, K);
}

#ifdef DTM_GEMM_AVX2

inline void gemm_nt_f32(float* C, const float* A, const float* B, int M, int N, int K) {
  int i = 0;
  for (; i + 2 <= M; i += 2) {
    const float* a0 = A + static_cast<std::size_t>(i) * K;
    const float* a1 = a0 + K;
    float* c0 = C + static_cast<std::size_t>(i) * N;
    float* c1 = c0 + N;
    int j = 0;
    for (; j + 4 <= N; j += 4) {
      const float* b0 = B + static_cast<std::size_t>(j) * K;
      const float* b1 = b0 + K;
      const float* b2 = b1 + K;
      const float* b3 = b2 + K;
      __m256 s00 = _mm256_setzero_ps(), s01 = s00, s02 = s00, s03 = s00;
      __m256 s10 = s00, s11 = s00, s12 = s00, s13 = s00;
      int k = 0;
      for (; k + 8 <= K; k += 8) {
        const __m256 av0 = _mm256_loadu_ps(a0 + k);
        const __m256 av1 = _mm256_loadu_ps(a1 + k);
        __m256 bv = _mm256_loadu_ps(b0 + k);
        s00 = _mm256_fmadd_ps(av0, bv, s00);
        s10 = _mm256_fmadd_ps(av1, bv, s10);
        bv = _mm256_loadu_ps(b1 + k);
        s01 = _mm256_fmadd_ps(av0, bv, s01);
        s11 = _mm256_fmadd_ps(av1, bv, s11);
        bv = _mm256_loadu_ps(b2 + k);
        s02 = _mm256_fmadd_ps(av0, bv, s02);
        s12 = _mm256_fmadd_ps(av1, bv, s12);
        bv = _mm256_loadu_ps(b3 + k);
        s03 = _mm256_fmadd_ps(av0, bv, s03);
        s13 = _mm256_fmadd_ps(av1, bv, s13);
      }
      float d00 = hsum256(s00), d01 = hsum256(s01), d02 = hsum256(s02), d03 = hsum256(s03);
      float d10 = hsum256(s10), d11 = hsum256(s11), d12 = hsum256(s12), d13 = hsum256(s13);
      for (; k < K; ++k) {
        const float v0 = a0[k], v1 = a1[k];
        d00 += v0 * b0[k];
        d01 += v0 * b1[k];
        d02 += v0 * b2[k];
        d03 += v0 * b3[k];
        d10 += v1 * b0[k];
        d11 += v1 * b1[k];
        d12 += v1 * b2[k];
        d13 += v1 * b3[k];
      }
      c0[j] += d00;
      c0[j + 1] += d01;
      c0[j + 2] += d02;
      c0[j + 3] += d03;
      c1[j] += d10;
      c1[j + 1] += d11;
      c1[j + 2] += d12;
      c1[j + 3] += d13;
    }
    for (; j < N; ++j) {
      const float* b = B + static_cast<std::size_t>(j) * K;
      float s0 = 0, s1 = 0;
      for (int k = 0; k < K; ++k) {
        s0 += a0[k] * b[k];
        s1 += a1[k] * b[k];
      }
      c0[j] += s0;
      c1[j] += s1;
    }
  }
  if (i < M) gemm_nt_generic(C + static_cast<std::size_t>(i) * N, A + static_cast<std::size_t>(i) * K, B, M - i, N, K);
}

inline void gemm_nt_f64(double* C, const double* A, const double* B, int M, int N, int K) {
  int i = 0;
  for (; i + 2 <= M; i += 2) {
    const double* a0 = A + static_cast<std::size_t>(i) * K;
    const double* a1 = a0 + K;
    double* c0 = C + static_cast<std::size_t>(i) * N;
    double* c1 = c0 + N;
    int j = 0;
    for (; j + 4 <= N; j += 4) {
      const double* b0 = B + static_cast<std::size_t>(j) * K;
      const double* b1 = b0 + K;
      const double* b2 = b1 + K;
      const double* b3 = b2 + K;
      __m256d s00 = _mm256_setzero_pd(), s01 = s00, s02 = s00, s03 = s00;
      __m256d s10 = s00, s11 = s00, s12 = s00, s13 = s00;
      int k = 0;
      for (; k + 4 <= K; k += 4) {
        const __m256d av0 = _mm256_loadu_pd(a0 + k);
        const __m256d av1 = _mm256_loadu_pd(a1 + k);
        __m256d bv = _mm256_loadu_pd(b0 + k);
        s00 = _mm256_fmadd_pd(av0, bv, s00);
        s10 = _mm256_fmadd_pd(av1, bv, s10);
        bv = _mm256_loadu_pd(b1 + k);
        s01 = _mm256_fmadd_pd(av0, bv, s01);
        s11 = _mm256_fmadd_pd(av1, bv, s11);
        bv = _mm256_loadu_pd(b2 + k);
        s02 = _mm256_fmadd_pd(av0, bv, s02);
        s12 = _mm256_fmadd_pd(av1, bv, s12);
        bv = _mm256_loadu_pd(b3 + k);
        s03 = _mm256_fmadd_pd(av0, bv, s03);
        s13 = _mm256_fmadd_pd(av1, bv, s13);
      }
      double d00 = hsum256d(s00), d01 = hsum256d(s01), d02 = hsum256d(s02), d03 = hsum256d(s03);
      double d10 = hsum256d(s10), d11 = hsum256d(s11), d12 = hsum256d(s12), d13 = hsum256d(s13);
      for (; k < K; ++k) {
        const double v0 = a0[k], v1 = a1[k];
        d00 += v0 * b0[k];
        d01 += v0 * b1[k];
        d02 += v0 * b2[k];
        d03 += v0 * b3[k];
        d10 += v1 * b0[k];
        d11 += v1 * b1[k];
        d12 += v1 * b2[k];
        d13 += v1 * b3[k];
      }
      c0[j] += d00;
      c0[j + 1] += d01;
      c0[j + 2] += d02;
      c0[j + 3] += d03;
      c1[j] += d10;
      c1[j + 1] += d11;
      c1[j + 2] += d12;
      c1[j + 3] += d13;
    }
    for (; j < N; ++j) {
      const double* b = B + static_cast<std::size_t>(j) * K;
      double s0 = 0, s1 = 0;
      for (int k = 0; k < K; ++k) {
        s0 += a0[k] * b[k];
        s1 += a1[k] * b[k];
      }
      c0[j] += s0;
      c1[j] += s1;
    }
  }
  if (i < M) gemm_nt_generic(C + static_cast<std::size_t>(i) * N, A + static_cast<std::size_t>(i) * K, B, M - i, N, K);
}

#endif  // DTM_GEMM_AVX2

template <typename T>
void gemm_nt(T* C, const T* A, const T* B, int M, int N, int K) {
#ifdef DTM_GEMM_AVX2
  if constexpr (std::is_same_v<T, float>) {
    gemm_nt_f32(C, A, B, M, N, K);
    return;
  } else if constexpr (std::is_same_v<T, double>) {
    gemm_nt_f64(C, A, B, M, N, K);
    return;
  }
#endif
  gemm_nt_generic(C, A, B, M, N, K);
}

}  // namespace dtm::detail
