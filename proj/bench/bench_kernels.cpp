// Throughput comparison between the serial reference kernels and the
// OpenMP-parallel defaults. Run: ./bench_kernels [--benchmark_filter=...]

#include <benchmark/benchmark.h>

#include <vector>

#include "common.hpp"
#include "kernels.hpp"

using namespace vce;

namespace {

std::vector<float> random_mat(std::int64_t n, std::uint64_t seed) {
    std::vector<float> v(n);
    Rng rng(seed);
    rng.fill_normal(v.data(), n);
    return v;
}

void bm_gemm_nn_serial(benchmark::State& state) {
    const std::int64_t m = state.range(0), k = state.range(1), n = state.range(2);
    const auto a = random_mat(m * k, 1), b = random_mat(k * n, 2);
    std::vector<float> c(m * n);
    for (auto _ : state) {
        kern::ref::gemm_nn<float>(m, n, k, 1.0f, a.data(), b.data(), c.data());
        benchmark::ClobberMemory();
    }
    state.SetItemsProcessed(state.iterations() * 2 * m * n * k);
}

void bm_gemm_nn_omp(benchmark::State& state) {
    const std::int64_t m = state.range(0), k = state.range(1), n = state.range(2);
    const auto a = random_mat(m * k, 1), b = random_mat(k * n, 2);
    std::vector<float> c(m * n);
    for (auto _ : state) {
        kern::gemm_nn<float>(m, n, k, 1.0f, a.data(), b.data(), c.data());
        benchmark::ClobberMemory();
    }
    state.SetItemsProcessed(state.iterations() * 2 * m * n * k);
}

void bm_gemm_nt_serial(benchmark::State& state) {
    const std::int64_t m = state.range(0), k = state.range(1), n = state.range(2);
    const auto a = random_mat(m * k, 1), b = random_mat(n * k, 2);
    std::vector<float> c(m * n);
    for (auto _ : state) {
        kern::ref::gemm_nt<float>(m, n, k, 1.0f, a.data(), b.data(), c.data());
        benchmark::ClobberMemory();
    }
    state.SetItemsProcessed(state.iterations() * 2 * m * n * k);
}

void bm_gemm_nt_omp(benchmark::State& state) {
    const std::int64_t m = state.range(0), k = state.range(1), n = state.range(2);
    const auto a = random_mat(m * k, 1), b = random_mat(n * k, 2);
    std::vector<float> c(m * n);
    for (auto _ : state) {
        kern::gemm_nt<float>(m, n, k, 1.0f, a.data(), b.data(), c.data());
        benchmark::ClobberMemory();
    }
    state.SetItemsProcessed(state.iterations() * 2 * m * n * k);
}

void bm_softmax_serial(benchmark::State& state) {
    const std::int64_t rows = state.range(0), cols = state.range(1);
    const auto x = random_mat(rows * cols, 3);
    std::vector<float> y(rows * cols);
    for (auto _ : state) {
        kern::ref::softmax_rows<float>(rows, cols, x.data(), y.data());
        benchmark::ClobberMemory();
    }
    state.SetItemsProcessed(state.iterations() * rows * cols);
}

void bm_softmax_omp(benchmark::State& state) {
    const std::int64_t rows = state.range(0), cols = state.range(1);
    const auto x = random_mat(rows * cols, 3);
    std::vector<float> y(rows * cols);
    for (auto _ : state) {
        kern::softmax_rows<float>(rows, cols, x.data(), y.data());
        benchmark::ClobberMemory();
    }
    state.SetItemsProcessed(state.iterations() * rows * cols);
}

void bm_layernorm_serial(benchmark::State& state) {
    const std::int64_t rows = state.range(0), cols = state.range(1);
    const auto x = random_mat(rows * cols, 4);
    std::vector<float> y(rows * cols);
    for (auto _ : state) {
        kern::ref::layernorm_rows<float>(rows, cols, 1e-5f, x.data(), y.data());
        benchmark::ClobberMemory();
    }
    state.SetItemsProcessed(state.iterations() * rows * cols);
}

void bm_layernorm_omp(benchmark::State& state) {
    const std::int64_t rows = state.range(0), cols = state.range(1);
    const auto x = random_mat(rows * cols, 4);
    std::vector<float> y(rows * cols);
    for (auto _ : state) {
        kern::layernorm_rows<float>(rows, cols, 1e-5f, x.data(), y.data());
        benchmark::ClobberMemory();
    }
    state.SetItemsProcessed(state.iterations() * rows * cols);
}

}  // namespace

// Training-shaped problems: token projections, attention scores, FFN.
BENCHMARK(bm_gemm_nn_serial)->Args({1024, 128, 128})->Args({1024, 128, 512})->Args({1024, 32, 1024});
BENCHMARK(bm_gemm_nn_omp)->Args({1024, 128, 128})->Args({1024, 128, 512})->Args({1024, 32, 1024});
BENCHMARK(bm_gemm_nt_serial)->Args({1024, 128, 128})->Args({128, 1024, 512});
BENCHMARK(bm_gemm_nt_omp)->Args({1024, 128, 128})->Args({128, 1024, 512});
BENCHMARK(bm_softmax_serial)->Args({4096, 1024});
BENCHMARK(bm_softmax_omp)->Args({4096, 1024});
BENCHMARK(bm_layernorm_serial)->Args({1024, 128});
BENCHMARK(bm_layernorm_omp)->Args({1024, 128});

BENCHMARK_MAIN();
