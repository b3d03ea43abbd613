#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "common.hpp"
#include "kernels.hpp"

using namespace vce;

namespace {

std::vector<double> naive_gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k,
                                  double alpha, const std::vector<double>& a,
                                  const std::vector<double>& b) {
    std::vector<double> c(m * n, 0.0);
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
            double acc = 0;
            for (std::int64_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
            c[i * n + j] = alpha * acc;
        }
    return c;
}

std::vector<double> random_vec(std::int64_t n, std::uint64_t seed) {
    std::vector<double> v(n);
    Rng rng(seed);
    rng.fill_normal(v.data(), n);
    return v;
}

std::vector<float> random_vec_f(std::int64_t n, std::uint64_t seed) {
    std::vector<float> v(n);
    Rng rng(seed);
    rng.fill_normal(v.data(), n);
    return v;
}

}  // namespace

TEST_CASE("gemm variants against the naive triple loop") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const std::int64_t m = 1 + rng.uniform_int(12);
        const std::int64_t n = 1 + rng.uniform_int(12);
        const std::int64_t k = 1 + rng.uniform_int(12);
        const double alpha = rng.normal();
        const auto a = random_vec(m * k, 100 + trial);
        const auto b = random_vec(k * n, 200 + trial);
        const auto want = naive_gemm_nn(m, n, k, alpha, a, b);

        std::vector<double> c(m * n);
        kern::gemm_nn<double>(m, n, k, alpha, a.data(), b.data(), c.data());
        for (std::int64_t i = 0; i < m * n; ++i)
            CHECK(c[i] == doctest::Approx(want[i]).epsilon(1e-12));

        // nt takes B transposed.
        std::vector<double> bt(n * k);
        for (std::int64_t kk = 0; kk < k; ++kk)
            for (std::int64_t j = 0; j < n; ++j) bt[j * k + kk] = b[kk * n + j];
        kern::gemm_nt<double>(m, n, k, alpha, a.data(), bt.data(), c.data());
        for (std::int64_t i = 0; i < m * n; ++i)
            CHECK(c[i] == doctest::Approx(want[i]).epsilon(1e-12));

        // tn takes A transposed.
        std::vector<double> at(k * m);
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t kk = 0; kk < k; ++kk) at[kk * m + i] = a[i * k + kk];
        kern::gemm_tn<double>(m, n, k, alpha, at.data(), b.data(), c.data());
        for (std::int64_t i = 0; i < m * n; ++i)
            CHECK(c[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
}

TEST_CASE("gemm accumulate flag adds into the output") {
    const auto a = random_vec(6, 1), b = random_vec(9, 2);
    std::vector<double> c(2 * 3, 1.5);
    kern::gemm_nn<double>(2, 3, 3, 1.0, a.data(), b.data(), c.data(), true);
    const auto want = naive_gemm_nn(2, 3, 3, 1.0, a, b);
    for (int i = 0; i < 6; ++i) CHECK(c[i] == doctest::Approx(want[i] + 1.5));
}

TEST_CASE("parallel kernels match the serial reference bitwise") {
    Rng shape_rng(11);
    for (int trial = 0; trial < 12; ++trial) {
        const std::int64_t m = 1 + shape_rng.uniform_int(65);
        const std::int64_t n = 1 + shape_rng.uniform_int(65);
        const std::int64_t k = 1 + shape_rng.uniform_int(65);
        const auto a = random_vec_f(m * k, 300 + trial);
        const auto b = random_vec_f(k * n, 400 + trial);
        std::vector<float> bt(n * k);
        kern::transpose2d<float>(k, n, b.data(), bt.data());

        std::vector<float> c_par(m * n), c_ser(m * n);
        kern::gemm_nn<float>(m, n, k, 0.75f, a.data(), b.data(), c_par.data());
        kern::ref::gemm_nn<float>(m, n, k, 0.75f, a.data(), b.data(), c_ser.data());
        CHECK(std::memcmp(c_par.data(), c_ser.data(), m * n * 4) == 0);

        kern::gemm_nt<float>(m, n, k, 1.0f, a.data(), bt.data(), c_par.data());
        kern::ref::gemm_nt<float>(m, n, k, 1.0f, a.data(), bt.data(), c_ser.data());
        CHECK(std::memcmp(c_par.data(), c_ser.data(), m * n * 4) == 0);

        std::vector<float> g_par(n * n), g_ser(n * n);  // B^T B via tn
        kern::gemm_tn<float>(n, n, k, 1.0f, b.data(), b.data(), g_par.data());
        kern::ref::gemm_tn<float>(n, n, k, 1.0f, b.data(), b.data(), g_ser.data());
        CHECK(std::memcmp(g_par.data(), g_ser.data(), n * n * 4) == 0);

        std::vector<float> y_par(m * k), y_ser(m * k);
        kern::softmax_rows<float>(m, k, a.data(), y_par.data());
        kern::ref::softmax_rows<float>(m, k, a.data(), y_ser.data());
        CHECK(std::memcmp(y_par.data(), y_ser.data(), m * k * 4) == 0);

        kern::layernorm_rows<float>(m, k, 1e-5f, a.data(), y_par.data());
        kern::ref::layernorm_rows<float>(m, k, 1e-5f, a.data(), y_ser.data());
        CHECK(std::memcmp(y_par.data(), y_ser.data(), m * k * 4) == 0);

        std::vector<float> t_par(m * k), t_ser(m * k);
        kern::transpose2d<float>(m, k, a.data(), t_par.data());
        kern::ref::transpose2d<float>(m, k, a.data(), t_ser.data());
        CHECK(std::memcmp(t_par.data(), t_ser.data(), m * k * 4) == 0);
    }
}

TEST_CASE("all_finite flags NaN and infinity") {
    std::vector<float> v = {1.0f, -2.0f, 3.0f};
    CHECK(kern::all_finite(v.data(), 3));
    v[1] = std::numeric_limits<float>::infinity();
    CHECK_FALSE(kern::all_finite(v.data(), 3));
    v[1] = std::numeric_limits<float>::quiet_NaN();
    CHECK_FALSE(kern::all_finite(v.data(), 3));
    v[1] = -std::numeric_limits<float>::infinity();
    CHECK_FALSE(kern::all_finite(v.data(), 3));
}
