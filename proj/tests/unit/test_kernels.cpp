// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "dta/error.hpp"
#include "dta/kernels.hpp"
#include "dta/tape.hpp"

using namespace dta;

namespace {

std::vector<float> random_vec(std::mt19937_64& rng, size_t n) {
    std::normal_distribution<float> d(0.0f, 1.0f);
    std::vector<float> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

// Double-precision oracle for C = A * B.
std::vector<double> gemm_oracle(int64_t m, int64_t n, int64_t k, const std::vector<float>& a,
                                const std::vector<float>& b) {
    std::vector<double> c(static_cast<size_t>(m * n), 0.0);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p) acc += static_cast<double>(a[i * k + p]) * b[p * n + j];
            c[i * n + j] = acc;
        }
    return c;
}

struct Dims {
    int64_t m, n, k;
};

const Dims kDims[] = {{1, 1, 1}, {3, 5, 7}, {4, 16, 8}, {5, 17, 3}, {17, 24, 16}, {34, 192, 64}, {9, 129, 33}};

} // namespace

TEST_CASE("scalar gemm matches the double oracle") {
    std::mt19937_64 rng(1);
    for (auto d : kDims) {
        auto a = random_vec(rng, d.m * d.k);
        auto b = random_vec(rng, d.k * d.n);
        std::vector<float> c(d.m * d.n);
        kernels::scalar::gemm(d.m, d.n, d.k, a.data(), b.data(), c.data());
        auto ref = gemm_oracle(d.m, d.n, d.k, a, b);
        for (size_t i = 0; i < c.size(); ++i) CHECK(std::fabs(c[i] - ref[i]) < 1e-4 * (1.0 + std::sqrt(double(d.k))));
    }
}

#ifdef DTA_HAVE_AVX2_KERNELS
TEST_CASE("avx2 kernels agree with the scalar reference") {
    if (!kernels::supported(kernels::Isa::avx2)) {
        MESSAGE("avx2 not available on this CPU; skipping");
        return;
    }
    std::mt19937_64 rng(2);
    for (auto d : kDims) {
        auto a = random_vec(rng, d.m * d.k);
        auto b = random_vec(rng, d.k * d.n);
        std::vector<float> cs(d.m * d.n), cv(d.m * d.n);
        kernels::scalar::gemm(d.m, d.n, d.k, a.data(), b.data(), cs.data());
        kernels::avx2::gemm(d.m, d.n, d.k, a.data(), b.data(), cv.data());
        for (size_t i = 0; i < cs.size(); ++i) CHECK(std::fabs(cs[i] - cv[i]) < 1e-5 * (1.0 + d.k));

        auto x = random_vec(rng, d.n * 3 + 1);
        auto y0 = random_vec(rng, x.size());
        auto ys = y0, yv = y0;
        kernels::scalar::accumulate(x.size(), x.data(), ys.data());
        kernels::avx2::accumulate(x.size(), x.data(), yv.data());
        CHECK(ys == yv);  // elementwise adds round identically

        ys = y0;
        yv = y0;
        kernels::scalar::axpy(x.size(), 0.37f, x.data(), ys.data());
        kernels::avx2::axpy(x.size(), 0.37f, x.data(), yv.data());
        for (size_t i = 0; i < ys.size(); ++i) CHECK(std::fabs(ys[i] - yv[i]) < 1e-6f * (1 + std::fabs(ys[i])));
    }
}

TEST_CASE("avx2 gemm rows do not depend on the row count") {
    if (!kernels::supported(kernels::Isa::avx2)) return;
    std::mt19937_64 rng(3);
    const int64_t n = 37, k = 19;
    auto a = random_vec(rng, 11 * k);
    auto b = random_vec(rng, k * n);
    std::vector<float> all(11 * n);
    kernels::avx2::gemm(11, n, k, a.data(), b.data(), all.data());
    for (int64_t i = 0; i < 11; ++i) {
        std::vector<float> one(n);
        kernels::avx2::gemm(1, n, k, a.data() + i * k, b.data(), one.data());
        for (int64_t j = 0; j < n; ++j) CHECK(one[j] == all[i * n + j]);
    }
}
#endif

TEST_CASE("tape results match across kernel sets") {
    std::mt19937_64 rng(4);
    auto av = random_vec(rng, 6 * 10);
    auto bv = random_vec(rng, 10 * 12);
    const Tensor a({6, 10}, av), b({10, 12}, bv);
    std::vector<Tensor> outs, grads;
    for (auto isa : {kernels::Isa::scalar, kernels::Isa::avx2}) {
        if (!kernels::supported(isa)) continue;
        kernels::select(isa);
        Tape t;
        Var x = t.leaf(a, true);
        Var y = matmul(x, t.constant(b));
        outs.push_back(y.value());
        grads.push_back(t.backward(sum(gelu(y))).of(x));
    }
    kernels::select(kernels::supported(kernels::Isa::avx2) ? kernels::Isa::avx2 : kernels::Isa::scalar);
    for (size_t i = 1; i < outs.size(); ++i) {
        CHECK(max_abs_diff(outs[0], outs[i]) < 1e-4f);
        CHECK(max_abs_diff(grads[0], grads[i]) < 1e-4f);
    }
}

TEST_CASE("dispatch reports the scalar set as always available") {
    CHECK(kernels::supported(kernels::Isa::scalar));
    CHECK(kernels::table(kernels::Isa::scalar).isa == kernels::Isa::scalar);
    CHECK(std::string(kernels::isa_name(kernels::active().isa)).size() > 0);
}
