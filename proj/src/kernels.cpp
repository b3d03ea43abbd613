#include "kernels.hpp"

#include <malloc.h>

#include <algorithm>
#include <cmath>
#include <vector>

namespace vce::kern {

void tune_allocator() {
    // Keep multi-MB activation buffers inside the main arena so freed blocks
    // are reused instead of unmapped and re-faulted every step.
    mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
}

// Per-row workers. noinline keeps codegen identical between the serial and
// the OpenMP call sites, which is what makes the two flavors bitwise equal.

template <class T>
[[gnu::noinline]] static void gemm_nn_row(std::int64_t n, std::int64_t k, T alpha,
                                          const T* a_row, const T* b, T* c_row,
                                          bool accumulate) {
    if (!accumulate) std::fill(c_row, c_row + n, T(0));
    for (std::int64_t kk = 0; kk < k; ++kk) {
        const T av = alpha * a_row[kk];
        const T* b_row = b + kk * n;
#pragma omp simd
        for (std::int64_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
    }
}

template <class T>
[[gnu::noinline]] static void gemm_nt_row(std::int64_t n, std::int64_t k, T alpha,
                                          const T* a_row, const T* b, T* c_row,
                                          bool accumulate) {
    for (std::int64_t j = 0; j < n; ++j) {
        const T* b_row = b + j * k;
        T acc = 0;
#pragma omp simd reduction(+ : acc)
        for (std::int64_t kk = 0; kk < k; ++kk) acc += a_row[kk] * b_row[kk];
        c_row[j] = accumulate ? c_row[j] + alpha * acc : alpha * acc;
    }
}

template <class T>
[[gnu::noinline]] static void softmax_row(std::int64_t cols, const T* x, T* y) {
    T mx = x[0];
    for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    T sum = 0;
#pragma omp simd reduction(+ : sum)
    for (std::int64_t j = 0; j < cols; ++j) {
        y[j] = exp_approx(x[j] - mx);
        sum += y[j];
    }
    const T inv = T(1) / sum;
#pragma omp simd
    for (std::int64_t j = 0; j < cols; ++j) y[j] *= inv;
}

template <class T>
[[gnu::noinline]] static void layernorm_row(std::int64_t cols, T eps, const T* x, T* y,
                                            T* mean_out, T* inv_std_out) {
    T mean = 0;
    for (std::int64_t j = 0; j < cols; ++j) mean += x[j];
    mean /= static_cast<T>(cols);
    T var = 0;
    for (std::int64_t j = 0; j < cols; ++j) {
        const T d = x[j] - mean;
        var += d * d;
    }
    var /= static_cast<T>(cols);
    const T inv_std = T(1) / std::sqrt(var + eps);
#pragma omp simd
    for (std::int64_t j = 0; j < cols; ++j) y[j] = (x[j] - mean) * inv_std;
    if (mean_out) *mean_out = mean;
    if (inv_std_out) *inv_std_out = inv_std;
}

template <class T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
             const T* a, const T* b, T* c, bool accumulate) {
#pragma omp parallel for schedule(static) if(m > 48)
    for (std::int64_t i = 0; i < m; ++i)
        gemm_nn_row(n, k, alpha, a + i * k, b, c + i * n, accumulate);
}

template <class T>
void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
             const T* a, const T* b, T* c, bool accumulate) {
#pragma omp parallel for schedule(static) if(m > 48)
    for (std::int64_t i = 0; i < m; ++i)
        gemm_nt_row(n, k, alpha, a + i * k, b, c + i * n, accumulate);
}

template <class T>
void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
             const T* a, const T* b, T* c, bool accumulate) {
    // A is K x M; materialize A^T once, then reuse the nn row worker.
    std::vector<T> at(static_cast<std::size_t>(m) * k);
    transpose2d(k, m, a, at.data());
#pragma omp parallel for schedule(static) if(m > 48)
    for (std::int64_t i = 0; i < m; ++i)
        gemm_nn_row(n, k, alpha, at.data() + i * k, b, c + i * n, accumulate);
}

template <class T>
void softmax_rows(std::int64_t rows, std::int64_t cols, const T* x, T* y) {
#pragma omp parallel for schedule(static) if(rows > 48)
    for (std::int64_t i = 0; i < rows; ++i) softmax_row(cols, x + i * cols, y + i * cols);
}

template <class T>
void layernorm_rows(std::int64_t rows, std::int64_t cols, T eps, const T* x, T* y,
                    T* mean_out, T* inv_std_out) {
#pragma omp parallel for schedule(static) if(rows > 48)
    for (std::int64_t i = 0; i < rows; ++i)
        layernorm_row(cols, eps, x + i * cols, y + i * cols,
                      mean_out ? mean_out + i : nullptr,
                      inv_std_out ? inv_std_out + i : nullptr);
}

template <class T>
void transpose2d(std::int64_t rows, std::int64_t cols, const T* x, T* y) {
#pragma omp parallel for schedule(static) if(rows > 48)
    for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < cols; ++j) y[j * rows + i] = x[i * cols + j];
}

template <class T>
bool all_finite(const T* x, std::int64_t n) {
    // x - x is 0 for finite values and NaN for NaN/Inf; the multiply trick
    // keeps the loop vectorizable.
    bool ok = true;
#pragma omp parallel for schedule(static) reduction(&& : ok) if (n > 65536)
    for (std::int64_t i = 0; i < n; ++i) ok = ok && (x[i] - x[i] == T(0));
    return ok;
}

namespace ref {

template <class T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
             const T* a, const T* b, T* c, bool accumulate) {
    for (std::int64_t i = 0; i < m; ++i)
        gemm_nn_row(n, k, alpha, a + i * k, b, c + i * n, accumulate);
}

template <class T>
void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
             const T* a, const T* b, T* c, bool accumulate) {
    for (std::int64_t i = 0; i < m; ++i)
        gemm_nt_row(n, k, alpha, a + i * k, b, c + i * n, accumulate);
}

template <class T>
void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
             const T* a, const T* b, T* c, bool accumulate) {
    std::vector<T> at(static_cast<std::size_t>(m) * k);
    transpose2d(k, m, a, at.data());
    for (std::int64_t i = 0; i < m; ++i)
        gemm_nn_row(n, k, alpha, at.data() + i * k, b, c + i * n, accumulate);
}

template <class T>
void softmax_rows(std::int64_t rows, std::int64_t cols, const T* x, T* y) {
    for (std::int64_t i = 0; i < rows; ++i) softmax_row(cols, x + i * cols, y + i * cols);
}

template <class T>
void layernorm_rows(std::int64_t rows, std::int64_t cols, T eps, const T* x, T* y,
                    T* mean_out, T* inv_std_out) {
    for (std::int64_t i = 0; i < rows; ++i)
        layernorm_row(cols, eps, x + i * cols, y + i * cols,
                      mean_out ? mean_out + i : nullptr,
                      inv_std_out ? inv_std_out + i : nullptr);
}

template <class T>
void transpose2d(std::int64_t rows, std::int64_t cols, const T* x, T* y) {
    for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < cols; ++j) y[j * rows + i] = x[i * cols + j];
}

}  // namespace ref

#define VCE_INSTANTIATE_KERNELS(T)                                                        \
    template void gemm_nn<T>(std::int64_t, std::int64_t, std::int64_t, T, const T*,      \
                             const T*, T*, bool);                                         \
    template void gemm_nt<T>(std::int64_t, std::int64_t, std::int64_t, T, const T*,      \
                             const T*, T*, bool);                                         \
    template void gemm_tn<T>(std::int64_t, std::int64_t, std::int64_t, T, const T*,      \
                             const T*, T*, bool);                                         \
    template void softmax_rows<T>(std::int64_t, std::int64_t, const T*, T*);              \
    template void layernorm_rows<T>(std::int64_t, std::int64_t, T, const T*, T*, T*, T*); \
    template void transpose2d<T>(std::int64_t, std::int64_t, const T*, T*);               \
    template bool all_finite<T>(const T*, std::int64_t);                                  \
    template void ref::gemm_nn<T>(std::int64_t, std::int64_t, std::int64_t, T, const T*, \
                                  const T*, T*, bool);                                    \
    template void ref::gemm_nt<T>(std::int64_t, std::int64_t, std::int64_t, T, const T*, \
                                  const T*, T*, bool);                                    \
    template void ref::gemm_tn<T>(std::int64_t, std::int64_t, std::int64_t, T, const T*, \
                                  const T*, T*, bool);                                    \
    template void ref::softmax_rows<T>(std::int64_t, std::int64_t, const T*, T*);         \
    template void ref::layernorm_rows<T>(std::int64_t, std::int64_t, T, const T*, T*,     \
                                         T*, T*);                                         \
    template void ref::transpose2d<T>(std::int64_t, std::int64_t, const T*, T*);

VCE_INSTANTIATE_KERNELS(float)
VCE_INSTANTIATE_KERNELS(double)

}  // namespace vce::kern
