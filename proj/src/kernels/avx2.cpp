// SPDX-License-Identifier: Apache-2.0
// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.
#include "dta/kernels.hpp"

#include <immintrin.h>

#include <cmath>

namespace dta::kernels::avx2 {

namespace {

// Scalar column tail. fmaf lowers to the same fused instruction the vector
// lanes use, so tail columns round exactly like vector columns.
inline void gemm_tail_cols(int64_t rows, int64_t n, int64_t k, int64_t j0, const float* a, const float* b,
                           float* c) {
    for (int64_t r = 0; r < rows; ++r) {
        const float* arow = a + r * k;
        for (int64_t j = j0; j < n; ++j) {
            float acc = 0.0f;
            for (int64_t p = 0; p < k; ++p) acc = std::fmaf(arow[p], b[p * n + j], acc);
            c[r * n + j] = acc;
        }
    }
}

template <int R>
inline void gemm_rows(int64_t n, int64_t k, const float* a, const float* b, float* c) {
    int64_t j = 0;
    for (; j + 16 <= n; j += 16) {
        __m256 acc0[R], acc1[R];
        for (int r = 0; r < R; ++r) {
            acc0[r] = _mm256_setzero_ps();
            acc1[r] = _mm256_setzero_ps();
        }
        for (int64_t p = 0; p < k; ++p) {
            const __m256 b0 = _mm256_loadu_ps(b + p * n + j);
            const __m256 b1 = _mm256_loadu_ps(b + p * n + j + 8);
            for (int r = 0; r < R; ++r) {
                const __m256 av = _mm256_broadcast_ss(a + r * k + p);
                acc0[r] = _mm256_fmadd_ps(av, b0, acc0[r]);
                acc1[r] = _mm256_fmadd_ps(av, b1, acc1[r]);
            }
        }
        for (int r = 0; r < R; ++r) {
            _mm256_storeu_ps(c + r * n + j, acc0[r]);
            _mm256_storeu_ps(c + r * n + j + 8, acc1[r]);
        }
    }
    for (; j + 8 <= n; j += 8) {
        __m256 acc[R];
        for (int r = 0; r < R; ++r) acc[r] = _mm256_setzero_ps();
        for (int64_t p = 0; p < k; ++p) {
            const __m256 b0 = _mm256_loadu_ps(b + p * n + j);
            for (int r = 0; r < R; ++r)
                acc[r] = _mm256_fmadd_ps(_mm256_broadcast_ss(a + r * k + p), b0, acc[r]);
        }
        for (int r = 0; r < R; ++r) _mm256_storeu_ps(c + r * n + j, acc[r]);
    }
    if (j < n) gemm_tail_cols(R, n, k, j, a, b, c);
}

} // namespace

void gemm(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c) {
    int64_t i = 0;
    for (; i + 4 <= m; i += 4) gemm_rows<4>(n, k, a + i * k, b, c + i * n);
    for (; i < m; ++i) gemm_rows<1>(n, k, a + i * k, b, c + i * n);
}

void accumulate(int64_t n, const float* x, float* y) {
    int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), _mm256_loadu_ps(x + i)));
    for (; i < n; ++i) y[i] += x[i];
}

void axpy(int64_t n, float alpha, const float* x, float* y) {
    const __m256 va = _mm256_set1_ps(alpha);
    int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    for (; i < n; ++i) y[i] = std::fmaf(alpha, x[i], y[i]);
}

} // namespace dta::kernels::avx2
