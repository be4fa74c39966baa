#include "sevdet/nn/gemm.hpp"

#include <algorithm>

namespace sevdet::nn {

namespace {

constexpr std::size_t kBlockN = 256;
constexpr std::size_t kBlockK = 128;

// Four rows of C updated together so each loaded B row is reused four times.
inline void kernel4(std::size_t n, std::size_t k0, std::size_t k1, std::size_t lda,
                    std::size_t ldb, std::size_t ldc, const double* __restrict a,
                    const double* __restrict b, double* __restrict c) {
  double* __restrict c0 = c;
  double* __restrict c1 = c + ldc;
  double* __restrict c2 = c + 2 * ldc;
  double* __restrict c3 = c + 3 * ldc;
  for (std::size_t kk = k0; kk < k1; ++kk) {
    const double a0 = a[kk];
    const double a1 = a[lda + kk];
    const double a2 = a[2 * lda + kk];
    const double a3 = a[3 * lda + kk];
    const double* __restrict brow = b + kk * ldb;
    for (std::size_t j = 0; j < n; ++j) {
      const double bv = brow[j];
      c0[j] += a0 * bv;
      c1[j] += a1 * bv;
      c2[j] += a2 * bv;
      c3[j] += a3 * bv;
    }
  }
}

inline void kernel1(std::size_t n, std::size_t k0, std::size_t k1, std::size_t ldb,
                    const double* __restrict a, const double* __restrict b,
                    double* __restrict c) {
  for (std::size_t kk = k0; kk < k1; ++kk) {
    const double av = a[kk];
    const double* __restrict brow = b + kk * ldb;
    for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
  }
}

}  // namespace

void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* a,
              const double* b, double* c) {
  for (std::size_t j0 = 0; j0 < n; j0 += kBlockN) {
    const std::size_t nb = std::min(kBlockN, n - j0);
    for (std::size_t k0 = 0; k0 < k; k0 += kBlockK) {
      const std::size_t k1 = std::min(k, k0 + kBlockK);
      std::size_t i = 0;
      for (; i + 4 <= m; i += 4) {
        kernel4(nb, k0, k1, k, n, n, a + i * k, b + j0, c + i * n + j0);
      }
      for (; i < m; ++i) kernel1(nb, k0, k1, n, a + i * k, b + j0, c + i * n + j0);
    }
  }
}

void transpose(std::size_t rows, std::size_t cols, const double* src, double* dst) {
  constexpr std::size_t kTile = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kTile) {
    const std::size_t r1 = std::min(rows, r0 + kTile);
    for (std::size_t c0 = 0; c0 < cols; c0 += kTile) {
      const std::size_t c1 = std::min(cols, c0 + kTile);
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t cc = c0; cc < c1; ++cc) dst[cc * rows + r] = src[r * cols + cc];
      }
    }
  }
}

}  // namespace sevdet::nn
