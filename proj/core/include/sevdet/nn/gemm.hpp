#pragma once

#include <cstddef>

namespace sevdet::nn {

/// C[M,N] += A[M,K] * B[K,N], all row-major and contiguous.
///
/// Summation order is fixed for given shapes, so results are bit-identical
/// across calls in the same build.
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* a,
              const double* b, double* c);

/// dst[cols,rows] = src[rows,cols]ᵀ
void transpose(std::size_t rows, std::size_t cols, const double* src, double* dst);

}  // namespace sevdet::nn
