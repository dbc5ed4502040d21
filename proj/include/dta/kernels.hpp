// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace dta::kernels {

enum class Isa { scalar, avx2 };

const char* isa_name(Isa isa);

/// Inner loops the tape spends its time in. Every variant computes each
/// output element with the same operation order regardless of the row
/// count, so a row's result never depends on what else is in the batch.
struct KernelTable {
    Isa isa;
    // C[M x N] = A[M x K] * B[K x N], all row-major and dense.
    void (*gemm)(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c);
    // y[i] += x[i]
    void (*accumulate)(int64_t n, const float* x, float* y);
    // y[i] += alpha * x[i]
    void (*axpy)(int64_t n, float alpha, const float* x, float* y);
};

bool supported(Isa isa);

// Table for a specific instruction set; throws ContractError if the CPU
// lacks it.
const KernelTable& table(Isa isa);

// Best supported table, chosen once per process unless overridden.
const KernelTable& active();

// Pins the active table (tests and benchmarks). Throws when unsupported.
void select(Isa isa);

namespace scalar {
void gemm(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c);
void accumulate(int64_t n, const float* x, float* y);
void axpy(int64_t n, float alpha, const float* x, float* y);
} // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
#define DTA_HAVE_AVX2_KERNELS 1
namespace avx2 {
void gemm(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c);
void accumulate(int64_t n, const float* x, float* y);
void axpy(int64_t n, float alpha, const float* x, float* y);
} // namespace avx2
#endif

} // namespace dta::kernels
