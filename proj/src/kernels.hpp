#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>

// Dense compute kernels shared by the tensor engine, the codec and the
// metrics. Every kernel comes in two flavors: the default OpenMP-parallel
// version in vce::kern and a serial reference in vce::kern::ref. Both call
// the same per-row worker, so for a fixed build they produce bitwise
// identical results regardless of thread count; tests assert this and
// bench/bench_kernels compares their throughput.

namespace vce::kern {

// Keeps glibc from serving the large per-step tensor buffers with fresh
// mmaps (page-fault churn); call once per process before heavy compute.
void tune_allocator();

// Polynomial expf, ~2 ulp on the clamped range; vectorizable, used by the
// float (training) paths. The double (verification) paths keep libm.
inline float fast_expf(float x) {
    x = std::min(88.02f, std::max(-87.0f, x));
    const float z = x * 1.44269504088896341f;
    const float n = std::floor(z + 0.5f);
    float r = x - n * 0.693359375f;
    r -= n * -2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    const std::int32_t bits = (static_cast<std::int32_t>(n) + 127) << 23;
    return p * std::bit_cast<float>(bits);
}

inline float fast_tanhf(float x) {
    return 1.0f - 2.0f / (fast_expf(2.0f * x) + 1.0f);
}

template <class T>
inline T exp_approx(T x) {
    if constexpr (std::is_same_v<T, float>)
        return fast_expf(x);
    else
        return std::exp(x);
}

template <class T>
inline T tanh_approx(T x) {
    if constexpr (std::is_same_v<T, float>)
        return fast_tanhf(x);
    else
        return std::tanh(x);
}

// C(M x N) = alpha * A(M x K) * B(K x N); accumulate adds into C.
template <class T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
             const T* a, const T* b, T* c, bool accumulate = false);

// C(M x N) = alpha * A(M x K) * B(N x K)^T.
template <class T>
void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
             const T* a, const T* b, T* c, bool accumulate = false);

// C(M x N) = alpha * A(K x M)^T * B(K x N).
template <class T>
void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
             const T* a, const T* b, T* c, bool accumulate = false);

// Row-wise softmax over the last dimension.
template <class T>
void softmax_rows(std::int64_t rows, std::int64_t cols, const T* x, T* y);

// Row-wise standardization (x - mean) / sqrt(var + eps), no affine.
// mean_out / inv_std_out (length rows) are optional saves for backward.
template <class T>
void layernorm_rows(std::int64_t rows, std::int64_t cols, T eps, const T* x, T* y,
                    T* mean_out = nullptr, T* inv_std_out = nullptr);

template <class T>
void transpose2d(std::int64_t rows, std::int64_t cols, const T* x, T* y);

template <class T>
bool all_finite(const T* x, std::int64_t n);

namespace ref {

template <class T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
             const T* a, const T* b, T* c, bool accumulate = false);

template <class T>
void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
             const T* a, const T* b, T* c, bool accumulate = false);

template <class T>
void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
             const T* a, const T* b, T* c, bool accumulate = false);

template <class T>
void softmax_rows(std::int64_t rows, std::int64_t cols, const T* x, T* y);

template <class T>
void layernorm_rows(std::int64_t rows, std::int64_t cols, T eps, const T* x, T* y,
                    T* mean_out = nullptr, T* inv_std_out = nullptr);

template <class T>
void transpose2d(std::int64_t rows, std::int64_t cols, const T* x, T* y);

}  // namespace ref

}  // namespace vce::kern
