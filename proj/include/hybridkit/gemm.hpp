// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace hybridkit::kernels {

// Row-major GEMM with a fixed per-element summation order: every C[i][j] is
// accumulated over k = 0..K-1 ascending, starting from zero, independent of
// M, N and the tiling. Two products that share a row of A and a column of B
// therefore produce bit-identical entries even when the matrices differ in
// width (the GQA clone relies on this).

namespace detail {

typedef float vec_f32 __attribute__((vector_size(64)));
typedef double vec_f64 __attribute__((vector_size(64)));

template <class T>
struct vec_of;
template <>
struct vec_of<float> {
  using type = vec_f32;
};
template <>
struct vec_of<double> {
  using type = vec_f64;
};
template <class T>
using vec_t = typename vec_of<T>::type;

template <class T>
constexpr std::size_t lanes = 64 / sizeof(T);

// RM rows × two vectors of columns held in registers across the k loop.
template <class T, std::size_t RM>
inline void tile_full(std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb,
                      T* C, std::size_t ldc, bool accumulate) {
  using V = vec_t<T>;
  constexpr std::size_t W = lanes<T>;
  V acc[RM][2];
  for (std::size_t r = 0; r < RM; ++r) acc[r][0] = acc[r][1] = V{};
  for (std::size_t k = 0; k < K; ++k) {
    V b0, b1;
    std::memcpy(&b0, B + k * ldb, sizeof(V));
    std::memcpy(&b1, B + k * ldb + W, sizeof(V));
    for (std::size_t r = 0; r < RM; ++r) {
      const V a = V{} + A[r * lda + k];
      acc[r][0] += a * b0;
      acc[r][1] += a * b1;
    }
  }
  for (std::size_t r = 0; r < RM; ++r) {
    T* c = C + r * ldc;
    if (accumulate) {
      V c0, c1;
      std::memcpy(&c0, c, sizeof(V));
      std::memcpy(&c1, c + W, sizeof(V));
      c0 += acc[r][0];
      c1 += acc[r][1];
      std::memcpy(c, &c0, sizeof(V));
      std::memcpy(c + W, &c1, sizeof(V));
    } else {
      std::memcpy(c, &acc[r][0], sizeof(V));
      std::memcpy(c + W, &acc[r][1], sizeof(V));
    }
  }
}

template <class T, std::size_t TN>
inline void tile_edge(std::size_t rows, std::size_t cols, std::size_t K, const T* A,
                      std::size_t lda, const T* B, std::size_t ldb, T* C, std::size_t ldc,
                      bool accumulate) {
  T acc[TN];
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) acc[j] = T(0);
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[r * lda + k];
      const T* b = B + k * ldb;
      for (std::size_t j = 0; j < cols; ++j) acc[j] += a * b[j];
    }
    T* c = C + r * ldc;
    if (accumulate)
      for (std::size_t j = 0; j < cols; ++j) c[j] += acc[j];
    else
      for (std::size_t j = 0; j < cols; ++j) c[j] = acc[j];
  }
}

template <class T>
constexpr std::size_t tile_cols() {
  return 2 * lanes<T>;
}

}  // namespace detail

/// C = A·B (or C += A·B). A is M×K with row stride lda, B is K×N with stride ldb.
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda,
             const T* B, std::size_t ldb, T* C, std::size_t ldc, bool accumulate = false) {
  constexpr std::size_t RM = 6;
  constexpr std::size_t TN = detail::tile_cols<T>();
  if (M == 0 || N == 0) return;
  if (K == 0) {
    if (!accumulate)
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) C[i * ldc + j] = T(0);
    return;
  }
  for (std::size_t j0 = 0; j0 < N; j0 += TN) {
    const std::size_t cols = std::min(TN, N - j0);
    std::size_t i0 = 0;
    if (cols == TN) {
      for (; i0 + RM <= M; i0 += RM)
        detail::tile_full<T, RM>(K, A + i0 * lda, lda, B + j0, ldb, C + i0 * ldc + j0, ldc,
                                     accumulate);
    }
    if (i0 < M)
      detail::tile_edge<T, TN>(M - i0, cols, K, A + i0 * lda, lda, B + j0, ldb,
                               C + i0 * ldc + j0, ldc, accumulate);
  }
}

/// Dense transpose of an R×C matrix (stride ld) into a packed C×R buffer.
template <class T>
void transpose_into(std::size_t R, std::size_t Cc, const T* src, std::size_t ld, T* dst) {
  constexpr std::size_t B = 32;
  for (std::size_t i0 = 0; i0 < R; i0 += B)
    for (std::size_t j0 = 0; j0 < Cc; j0 += B)
      for (std::size_t i = i0; i < std::min(R, i0 + B); ++i)
        for (std::size_t j = j0; j < std::min(Cc, j0 + B); ++j) dst[j * R + i] = src[i * ld + j];
}

/// General product with optional transposes. Transposed operands are packed
/// first so every call funnels through gemm_nn and keeps its summation order.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t M, std::size_t N, std::size_t K, const T* A,
          const T* B, T* C, bool accumulate = false) {
  std::vector<T> pa, pb;
  const T* a = A;
  const T* b = B;
  if (trans_a) {  // A stored K×M
    pa.resize(M * K);
    transpose_into(K, M, A, M, pa.data());
    a = pa.data();
  }
  if (trans_b) {  // B stored N×K
    pb.resize(K * N);
    transpose_into(N, K, B, K, pb.data());
    b = pb.data();
  }
  gemm_nn(M, N, K, a, K, b, N, C, N, accumulate);
}

}  // namespace hybridkit::kernels
