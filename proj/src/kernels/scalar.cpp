// SPDX-License-Identifier: Apache-2.0
#include "dta/kernels.hpp"

#include <algorithm>

namespace dta::kernels::scalar {

// Reference i-k-j loop. Each C element accumulates over k in ascending
// order with a separate multiply and add.
void gemm(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c) {
    for (int64_t i = 0; i < m; ++i) {
        float* crow = c + i * n;
        std::fill(crow, crow + n, 0.0f);
        const float* arow = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const float av = arow[p];
            const float* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void accumulate(int64_t n, const float* x, float* y) {
    for (int64_t i = 0; i < n; ++i) y[i] += x[i];
}

void axpy(int64_t n, float alpha, const float* x, float* y) {
    for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

} // namespace dta::kernels::scalar
