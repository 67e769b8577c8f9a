// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense kernels. Every output element of gemm_nn accumulates over k in
// ascending order starting from zero (or from the existing value), so a row's
// result does not depend on how many other rows are computed alongside it.

namespace pbd::kern {

// C[m x n] (+)= A[m x k] * B[k x n]
void gemm_nn(int m, int n, int k, const double* A, int lda, const double* B, int ldb, double* C, int ldc,
             bool accumulate);

// C[m x n] += A[k x m]^T * B[k x n]
void gemm_tn_acc(int m, int n, int k, const double* A, int lda, const double* B, int ldb, double* C, int ldc);

// dst[cols x rows] = src[rows x cols]^T
void transpose(int rows, int cols, const double* src, int lds, double* dst, int ldd);

}  // namespace pbd::kern
