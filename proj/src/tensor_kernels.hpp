#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

namespace mted::kernels {

// C[M,N] += A[M,K] * B[K,N], all row-major and contiguous. Every output
// element accumulates its K terms in ascending order regardless of M or N,
// so a row computed alone is bit-identical to the same row in a batch.
template <class T>
void gemm(int64_t M, int64_t N, int64_t K, const T* __restrict A, const T* __restrict B,
          T* __restrict C) {
  constexpr int64_t kBlockN = 512;
  for (int64_t j0 = 0; j0 < N; j0 += kBlockN) {
    const int64_t jn = std::min(kBlockN, N - j0);
    int64_t i = 0;
    for (; i + 4 <= M; i += 4) {
      T* __restrict c0 = C + (i + 0) * N + j0;
      T* __restrict c1 = C + (i + 1) * N + j0;
      T* __restrict c2 = C + (i + 2) * N + j0;
      T* __restrict c3 = C + (i + 3) * N + j0;
      const T* a0 = A + (i + 0) * K;
      const T* a1 = A + (i + 1) * K;
      const T* a2 = A + (i + 2) * K;
      const T* a3 = A + (i + 3) * K;
      for (int64_t k = 0; k < K; ++k) {
        const T* __restrict b = B + k * N + j0;
        const T v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
        for (int64_t j = 0; j < jn; ++j) {
          const T bj = b[j];
          c0[j] += v0 * bj;
          c1[j] += v1 * bj;
          c2[j] += v2 * bj;
          c3[j] += v3 * bj;
        }
      }
    }
    for (; i < M; ++i) {
      T* __restrict c = C + i * N + j0;
      const T* a = A + i * K;
      for (int64_t k = 0; k < K; ++k) {
        const T* __restrict b = B + k * N + j0;
        const T v = a[k];
        for (int64_t j = 0; j < jn; ++j) c[j] += v * b[j];
      }
    }
  }
}

// dst[cols, rows] = src[rows, cols]^T
template <class T>
void transpose(int64_t rows, int64_t cols, const T* src, std::vector<T>& dst) {
  dst.resize(static_cast<size_t>(rows * cols));
  constexpr int64_t kTile = 32;
  for (int64_t r0 = 0; r0 < rows; r0 += kTile) {
    for (int64_t c0 = 0; c0 < cols; c0 += kTile) {
      const int64_t r1 = std::min(rows, r0 + kTile), c1 = std::min(cols, c0 + kTile);
      for (int64_t r = r0; r < r1; ++r) {
        for (int64_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
      }
    }
  }
}

struct ConvGeom {
  int64_t c, h, w, kh, kw, stride, pad, ho, wo;
};

// col[(c*kh + ki)*kw + kj, oy*wo + ox] = x[c, oy*s - p + ki, ox*s - p + kj]
template <class T>
void im2col(const ConvGeom& g, const T* x, std::vector<T>& col) {
  const int64_t hw = g.ho * g.wo;
  col.resize(static_cast<size_t>(g.c * g.kh * g.kw * hw));
  T* dst = col.data();
  for (int64_t c = 0; c < g.c; ++c) {
    const T* plane = x + c * g.h * g.w;
    for (int64_t ki = 0; ki < g.kh; ++ki) {
      for (int64_t kj = 0; kj < g.kw; ++kj) {
        for (int64_t oy = 0; oy < g.ho; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ki;
          T* row = dst + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(row, g.wo, T(0));
            continue;
          }
          const T* src = plane + iy * g.w;
          for (int64_t ox = 0; ox < g.wo; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kj;
            row[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
          }
        }
        dst += hw;
      }
    }
  }
}

// Adjoint of im2col: scatters col back into dx (accumulating).
template <class T>
void col2im(const ConvGeom& g, const T* col, T* dx) {
  const int64_t hw = g.ho * g.wo;
  const T* src = col;
  for (int64_t c = 0; c < g.c; ++c) {
    T* plane = dx + c * g.h * g.w;
    for (int64_t ki = 0; ki < g.kh; ++ki) {
      for (int64_t kj = 0; kj < g.kw; ++kj) {
        for (int64_t oy = 0; oy < g.ho; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          const T* row = src + oy * g.wo;
          T* dst = plane + iy * g.w;
          for (int64_t ox = 0; ox < g.wo; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.w) dst[ix] += row[ox];
          }
        }
        src += hw;
      }
    }
  }
}

}  // namespace mted::kernels
