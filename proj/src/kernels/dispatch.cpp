// SPDX-License-Identifier: Apache-2.0
#include <atomic>

#include "dta/error.hpp"
#include "dta/kernels.hpp"

namespace dta::kernels {

namespace {

constexpr KernelTable kScalar{Isa::scalar, &scalar::gemm, &scalar::accumulate, &scalar::axpy};
#ifdef DTA_HAVE_AVX2_KERNELS
constexpr KernelTable kAvx2{Isa::avx2, &avx2::gemm, &avx2::accumulate, &avx2::axpy};
#endif

const KernelTable* detect() {
#ifdef DTA_HAVE_AVX2_KERNELS
    if (supported(Isa::avx2)) return &kAvx2;
#endif
    return &kScalar;
}

std::atomic<const KernelTable*>& current() {
    static std::atomic<const KernelTable*> table{detect()};
    return table;
}

} // namespace

const char* isa_name(Isa isa) {
    switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
    }
    return "unknown";
}

bool supported(Isa isa) {
    switch (isa) {
    case Isa::scalar: return true;
    case Isa::avx2:
#ifdef DTA_HAVE_AVX2_KERNELS
        __builtin_cpu_init();
        return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
        return false;
#endif
    }
    return false;
}

const KernelTable& table(Isa isa) {
    if (!supported(isa)) throw ContractError(std::string("kernel set not supported on this CPU: ") + isa_name(isa));
#ifdef DTA_HAVE_AVX2_KERNELS
    if (isa == Isa::avx2) return kAvx2;
#endif
    return kScalar;
}

const KernelTable& active() { return *current().load(std::memory_order_acquire); }

void select(Isa isa) { current().store(&table(isa), std::memory_order_release); }

} // namespace dta::kernels
