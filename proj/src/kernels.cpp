// SPDX-License-Identifier: Apache-2.0
#include "kernels.hpp"

namespace pbd::kern {
namespace {

constexpr int kRows = 4;
constexpr int kCols = 32;

// C tile [rows x width] (+)= A * B[:, j0:j0+width], with A addressed as
// A[i * sai + kk * sak]. Each element sums its products in ascending kk.
template <int Rows, int Width>
inline void tile(int k, const double* A, long sai, long sak, const double* B, int ldb, double* C, int ldc,
                 bool accumulate) {
  double acc[Rows][Width];
  for (int r = 0; r < Rows; ++r)
    for (int j = 0; j < Width; ++j) acc[r][j] = accumulate ? C[static_cast<long>(r) * ldc + j] : 0.0;
  for (int kk = 0; kk < k; ++kk) {
    const double* b = B + static_cast<long>(kk) * ldb;
    for (int r = 0; r < Rows; ++r) {
      const double a = A[r * sai + kk * sak];
      for (int j = 0; j < Width; ++j) acc[r][j] += a * b[j];
    }
  }
  for (int r = 0; r < Rows; ++r)
    for (int j = 0; j < Width; ++j) C[static_cast<long>(r) * ldc + j] = acc[r][j];
}

inline void tile_dyn(int rows, int width, int k, const double* A, long sai, long sak, const double* B, int ldb,
                     double* C, int ldc, bool accumulate) {
  for (int r = 0; r < rows; ++r) {
    double* c = C + static_cast<long>(r) * ldc;
    if (!accumulate) {
      for (int j = 0; j < width; ++j) c[j] = 0.0;
    }
    for (int kk = 0; kk < k; ++kk) {
      const double a = A[r * sai + kk * sak];
      const double* b = B + static_cast<long>(kk) * ldb;
      for (int j = 0; j < width; ++j) c[j] += a * b[j];
    }
  }
}

void gemm_core(int m, int n, int k, const double* A, long sai, long sak, const double* B, int ldb, double* C, int ldc,
               bool accumulate) {
  int i = 0;
  for (; i + kRows <= m; i += kRows) {
    const double* a = A + i * sai;
    double* c = C + static_cast<long>(i) * ldc;
    int j = 0;
    for (; j + kCols <= n; j += kCols) tile<kRows, kCols>(k, a, sai, sak, B + j, ldb, c + j, ldc, accumulate);
    if (j < n) tile_dyn(kRows, n - j, k, a, sai, sak, B + j, ldb, c + j, ldc, accumulate);
  }
  for (; i < m; ++i) {
    const double* a = A + i * sai;
    double* c = C + static_cast<long>(i) * ldc;
    int j = 0;
    for (; j + kCols <= n; j += kCols) tile<1, kCols>(k, a, sai, sak, B + j, ldb, c + j, ldc, accumulate);
    if (j < n) tile_dyn(1, n - j, k, a, sai, sak, B + j, ldb, c + j, ldc, accumulate);
  }
}

}  // namespace

void gemm_nn(int m, int n, int k, const double* A, int lda, const double* B, int ldb, double* C, int ldc,
             bool accumulate) {
  gemm_core(m, n, k, A, lda, 1, B, ldb, C, ldc, accumulate);
}

void gemm_tn_acc(int m, int n, int k, const double* A, int lda, const double* B, int ldb, double* C, int ldc) {
  gemm_core(m, n, k, A, 1, lda, B, ldb, C, ldc, true);
}

void transpose(int rows, int cols, const double* src, int lds, double* dst, int ldd) {
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) dst[static_cast<long>(c) * ldd + r] = src[static_cast<long>(r) * lds + c];
}

}  // namespace pbd::kern
