#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "kernels.hpp"

namespace vce {

namespace {

template <class T>
TensorPtr<T> new_node(Shape shape, std::vector<T> data, const char* op,
                      std::vector<TensorPtr<T>> parents) {
    auto t = std::make_shared<Tensor<T>>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    t->op = op;
    for (const auto& p : parents) t->requires_grad = t->requires_grad || p->requires_grad;
    if (t->requires_grad) t->parents = std::move(parents);
    if (!kern::all_finite(t->data.data(), t->numel()))
        throw NumericError(std::string("non-finite output from '") + op + "' with shape " +
                           shape_str(t->shape));
    return t;
}

template <class T>
void accumulate_flat(Tensor<T>& dst, const T* g, std::int64_t n) {
    dst.ensure_grad();
    T* d = dst.grad.data();
#pragma omp parallel for schedule(static) if(n > 4096)
    for (std::int64_t i = 0; i < n; ++i) d[i] += g[i];
}

struct BcastPlan {
    Shape out;
    std::vector<std::int64_t> sa, sb;  // per-out-dim strides into a / b (0 = broadcast)
    // Recognized fast layouts: vec side broadcasts a (1 x C) row or (N x 1)
    // column against a full rank-2-style operand.
    enum Kind { equal, b_row, b_col, a_row, a_col, generic } kind = generic;
};

BcastPlan make_bcast(const Shape& a, const Shape& b, const char* op) {
    BcastPlan p;
    if (a == b) {
        p.kind = BcastPlan::equal;
        p.out = a;
        return p;
    }
    const std::size_t r = std::max(a.size(), b.size());
    p.out.resize(r);
    Shape ea(r, 1), eb(r, 1);
    std::copy(a.begin(), a.end(), ea.begin() + (r - a.size()));
    std::copy(b.begin(), b.end(), eb.begin() + (r - b.size()));
    for (std::size_t i = 0; i < r; ++i) {
        if (ea[i] != eb[i] && ea[i] != 1 && eb[i] != 1)
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                             " with " + shape_str(b));
        p.out[i] = std::max(ea[i], eb[i]);
    }
    p.sa.assign(r, 0);
    p.sb.assign(r, 0);
    std::int64_t stride = 1;
    for (std::size_t i = r; i-- > 0; stride *= ea[i]) p.sa[i] = (ea[i] == 1) ? 0 : stride;
    stride = 1;
    for (std::size_t i = r; i-- > 0; stride *= eb[i]) p.sb[i] = (eb[i] == 1) ? 0 : stride;
    for (std::size_t i = 0; i < r; ++i) {
        if (p.out[i] == 1) {
            p.sa[i] = 0;
            p.sb[i] = 0;
        }
    }

    const std::int64_t cols = p.out.back();
    const std::int64_t rows = numel(p.out) / cols;
    auto leading_all_one = [&](const Shape& e) {
        for (std::size_t i = 0; i + 1 < r; ++i)
            if (e[i] != 1) return false;
        return true;
    };
    if (numel(ea) == numel(p.out) && leading_all_one(eb) && eb.back() == cols)
        p.kind = BcastPlan::b_row;
    else if (numel(eb) == numel(p.out) && leading_all_one(ea) && ea.back() == cols)
        p.kind = BcastPlan::a_row;
    else if (r == 2 && numel(ea) == numel(p.out) && eb[0] == rows && eb[1] == 1)
        p.kind = BcastPlan::b_col;
    else if (r == 2 && numel(eb) == numel(p.out) && ea[0] == rows && ea[1] == 1)
        p.kind = BcastPlan::a_col;
    return p;
}

// Walks every output position of a broadcast pair and calls fn(ia, ib, io).
template <class Fn>
void bcast_walk(const BcastPlan& p, Fn&& fn) {
    const std::size_t r = p.out.size();
    const std::int64_t n = numel(p.out);
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t ia = 0, ib = 0;
    for (std::int64_t o = 0; o < n; ++o) {
        fn(ia, ib, o);
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            ia += p.sa[d];
            ib += p.sb[d];
            if (idx[d] < p.out[d]) break;
            ia -= p.sa[d] * p.out[d];
            ib -= p.sb[d] * p.out[d];
            idx[d] = 0;
        }
    }
}

enum class BinOp { add, sub, mul };

template <class T>
inline T bin_eval(BinOp op, T a, T b) {
    switch (op) {
        case BinOp::add: return a + b;
        case BinOp::sub: return a - b;
        default: return a * b;
    }
}

template <class T>
TensorPtr<T> binary(const TensorPtr<T>& a, const TensorPtr<T>& b, BinOp op, const char* name) {
    const BcastPlan p = make_bcast(a->shape, b->shape, name);
    const std::int64_t n = numel(p.out);
    const std::int64_t cols = p.out.empty() ? 1 : p.out.back();
    const std::int64_t rows = n / cols;
    std::vector<T> out(n);
    const T* pa = a->data.data();
    const T* pb = b->data.data();
    T* po = out.data();
    switch (p.kind) {
        case BcastPlan::equal:
#pragma omp parallel for schedule(static) if (n > 4096)
            for (std::int64_t i = 0; i < n; ++i) po[i] = bin_eval(op, pa[i], pb[i]);
            break;
        case BcastPlan::b_row:
#pragma omp parallel for schedule(static) if (rows > 48)
            for (std::int64_t i = 0; i < rows; ++i)
                for (std::int64_t j = 0; j < cols; ++j)
                    po[i * cols + j] = bin_eval(op, pa[i * cols + j], pb[j]);
            break;
        case BcastPlan::a_row:
#pragma omp parallel for schedule(static) if (rows > 48)
            for (std::int64_t i = 0; i < rows; ++i)
                for (std::int64_t j = 0; j < cols; ++j)
                    po[i * cols + j] = bin_eval(op, pa[j], pb[i * cols + j]);
            break;
        case BcastPlan::b_col:
#pragma omp parallel for schedule(static) if (rows > 48)
            for (std::int64_t i = 0; i < rows; ++i)
                for (std::int64_t j = 0; j < cols; ++j)
                    po[i * cols + j] = bin_eval(op, pa[i * cols + j], pb[i]);
            break;
        case BcastPlan::a_col:
#pragma omp parallel for schedule(static) if (rows > 48)
            for (std::int64_t i = 0; i < rows; ++i)
                for (std::int64_t j = 0; j < cols; ++j)
                    po[i * cols + j] = bin_eval(op, pa[i], pb[i * cols + j]);
            break;
        case BcastPlan::generic:
            bcast_walk(p, [&](std::int64_t ia, std::int64_t ib, std::int64_t io) {
                po[io] = bin_eval(op, pa[ia], pb[ib]);
            });
            break;
    }
    auto t = new_node<T>(p.out, std::move(out), name, {a, b});
    if (!t->requires_grad) return t;
    Tensor<T>* ta = a.get();
    Tensor<T>* tb = b.get();
    t->backprop = [ta, tb, p, op, rows, cols](Tensor<T>& self) {
        const T* g = self.grad.data();
        const std::int64_t n = self.numel();
        const T* pa = ta->data.data();
        const T* pb = tb->data.data();

        // Gradient into the full-shaped operand.
        auto full_side = [&](Tensor<T>* dst, const T* other_vec, bool vec_is_row,
                             bool negate) {
            dst->ensure_grad();
            T* d = dst->grad.data();
            const T s = negate ? T(-1) : T(1);
            if (op == BinOp::mul) {
#pragma omp parallel for schedule(static) if (rows > 48)
                for (std::int64_t i = 0; i < rows; ++i)
                    for (std::int64_t j = 0; j < cols; ++j)
                        d[i * cols + j] += g[i * cols + j] *
                                           (vec_is_row ? other_vec[j] : other_vec[i]);
            } else {
#pragma omp parallel for schedule(static) if (n > 4096)
                for (std::int64_t i = 0; i < n; ++i) d[i] += s * g[i];
            }
        };
        // Gradient into the broadcast vector, reduced over the other axis.
        auto vec_side = [&](Tensor<T>* dst, const T* full_data, bool vec_is_row,
                            bool negate) {
            dst->ensure_grad();
            T* d = dst->grad.data();
            const T s = negate ? T(-1) : T(1);
            if (vec_is_row) {
#pragma omp parallel for schedule(static) if (cols > 48)
                for (std::int64_t j = 0; j < cols; ++j) {
                    T acc = 0;
                    for (std::int64_t i = 0; i < rows; ++i)
                        acc += op == BinOp::mul ? g[i * cols + j] * full_data[i * cols + j]
                                                : g[i * cols + j];
                    d[j] += s * acc;
                }
            } else {
#pragma omp parallel for schedule(static) if (rows > 48)
                for (std::int64_t i = 0; i < rows; ++i) {
                    T acc = 0;
                    for (std::int64_t j = 0; j < cols; ++j)
                        acc += op == BinOp::mul ? g[i * cols + j] * full_data[i * cols + j]
                                                : g[i * cols + j];
                    d[i] += s * acc;
                }
            }
        };

        switch (p.kind) {
            case BcastPlan::equal:
                if (ta->requires_grad) {
                    ta->ensure_grad();
                    T* d = ta->grad.data();
                    if (op == BinOp::mul) {
#pragma omp parallel for schedule(static) if (n > 4096)
                        for (std::int64_t i = 0; i < n; ++i) d[i] += g[i] * pb[i];
                    } else {
#pragma omp parallel for schedule(static) if (n > 4096)
                        for (std::int64_t i = 0; i < n; ++i) d[i] += g[i];
                    }
                }
                if (tb->requires_grad) {
                    tb->ensure_grad();
                    T* d = tb->grad.data();
                    if (op == BinOp::mul) {
#pragma omp parallel for schedule(static) if (n > 4096)
                        for (std::int64_t i = 0; i < n; ++i) d[i] += g[i] * pa[i];
                    } else {
                        const T s = op == BinOp::sub ? T(-1) : T(1);
#pragma omp parallel for schedule(static) if (n > 4096)
                        for (std::int64_t i = 0; i < n; ++i) d[i] += s * g[i];
                    }
                }
                break;
            case BcastPlan::b_row:
                if (ta->requires_grad) full_side(ta, pb, true, false);
                if (tb->requires_grad) vec_side(tb, pa, true, op == BinOp::sub);
                break;
            case BcastPlan::b_col:
                if (ta->requires_grad) full_side(ta, pb, false, false);
                if (tb->requires_grad) vec_side(tb, pa, false, op == BinOp::sub);
                break;
            case BcastPlan::a_row:
                if (tb->requires_grad) full_side(tb, pa, true, op == BinOp::sub);
                if (ta->requires_grad) vec_side(ta, pb, true, false);
                break;
            case BcastPlan::a_col:
                if (tb->requires_grad) full_side(tb, pa, false, op == BinOp::sub);
                if (ta->requires_grad) vec_side(ta, pb, false, false);
                break;
            case BcastPlan::generic: {
                if (ta->requires_grad) ta->ensure_grad();
                if (tb->requires_grad) tb->ensure_grad();
                if (op == BinOp::mul) {
                    bcast_walk(p, [&](std::int64_t ia, std::int64_t ib, std::int64_t io) {
                        if (ta->requires_grad) ta->grad[ia] += g[io] * pb[ib];
                        if (tb->requires_grad) tb->grad[ib] += g[io] * pa[ia];
                    });
                } else {
                    const T bs = op == BinOp::sub ? T(-1) : T(1);
                    bcast_walk(p, [&](std::int64_t ia, std::int64_t ib, std::int64_t io) {
                        if (ta->requires_grad) ta->grad[ia] += g[io];
                        if (tb->requires_grad) tb->grad[ib] += bs * g[io];
                    });
                }
                break;
            }
        }
    };
    return t;
}

}  // namespace

template <class T>
TensorPtr<T> make_tensor(Shape shape, std::vector<T> data, bool requires_grad) {
    if (numel(shape) != static_cast<std::int64_t>(data.size()))
        throw ShapeError("make_tensor: shape " + shape_str(shape) + " wants " +
                         std::to_string(numel(shape)) + " values, got " +
                         std::to_string(data.size()));
    for (std::int64_t d : shape)
        if (d <= 0) throw ShapeError("make_tensor: non-positive dim in " + shape_str(shape));
    auto t = new_node<T>(std::move(shape), std::move(data), "leaf", {});
    t->requires_grad = requires_grad;
    return t;
}

template <class T>
TensorPtr<T> zeros(const Shape& shape, bool requires_grad) {
    return make_tensor<T>(shape, std::vector<T>(numel(shape), T(0)), requires_grad);
}

template <class T>
TensorPtr<T> full(const Shape& shape, T value, bool requires_grad) {
    return make_tensor<T>(shape, std::vector<T>(numel(shape), value), requires_grad);
}

template <class T>
TensorPtr<T> randn(const Shape& shape, Rng& rng, double stddev, bool requires_grad) {
    std::vector<T> data(numel(shape));
    rng.fill_normal(data.data(), static_cast<std::int64_t>(data.size()), 0.0, stddev);
    return make_tensor<T>(shape, std::move(data), requires_grad);
}

template <class T>
TensorPtr<T> matmul(const TensorPtr<T>& a, const TensorPtr<T>& b, double alpha) {
    if (a->shape.size() != 2 || b->shape.size() != 2)
        throw ShapeError("matmul: expects rank-2 operands, got " + shape_str(a->shape) +
                         " and " + shape_str(b->shape));
    const std::int64_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
    if (b->shape[0] != k)
        throw ShapeError("matmul: inner dims differ, " + shape_str(a->shape) + " x " +
                         shape_str(b->shape));
    std::vector<T> out(m * n);
    kern::gemm_nn(m, n, k, static_cast<T>(alpha), a->data.data(), b->data.data(), out.data());
    auto t = new_node<T>({m, n}, std::move(out), "matmul", {a, b});
    if (!t->requires_grad) return t;
    Tensor<T>* ta = a.get();
    Tensor<T>* tb = b.get();
    t->backprop = [ta, tb, m, n, k, alpha](Tensor<T>& self) {
        const T al = static_cast<T>(alpha);
        if (ta->requires_grad) {
            ta->ensure_grad();
            kern::gemm_nt(m, k, n, al, self.grad.data(), tb->data.data(), ta->grad.data(),
                          true);
        }
        if (tb->requires_grad) {
            tb->ensure_grad();
            kern::gemm_tn(k, n, m, al, ta->data.data(), self.grad.data(), tb->grad.data(),
                          true);
        }
    };
    return t;
}

template <class T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    return binary(a, b, BinOp::add, "add");
}
template <class T>
TensorPtr<T> sub(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    return binary(a, b, BinOp::sub, "sub");
}
template <class T>
TensorPtr<T> mul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    return binary(a, b, BinOp::mul, "mul");
}

template <class T>
TensorPtr<T> scale(const TensorPtr<T>& a, double s) {
    const std::int64_t n = a->numel();
    std::vector<T> out(n);
    const T sv = static_cast<T>(s);
    const T* pa = a->data.data();
#pragma omp parallel for schedule(static) if(n > 4096)
    for (std::int64_t i = 0; i < n; ++i) out[i] = sv * pa[i];
    auto t = new_node<T>(a->shape, std::move(out), "scale", {a});
    if (!t->requires_grad) return t;
    Tensor<T>* ta = a.get();
    t->backprop = [ta, sv](Tensor<T>& self) {
        ta->ensure_grad();
        const T* g = self.grad.data();
        T* d = ta->grad.data();
        const std::int64_t n = self.numel();
#pragma omp parallel for schedule(static) if(n > 4096)
        for (std::int64_t i = 0; i < n; ++i) d[i] += sv * g[i];
    };
    return t;
}

template <class T>
TensorPtr<T> softmax_lastdim(const TensorPtr<T>& a) {
    const std::int64_t rows = a->rows(), cols = a->cols();
    std::vector<T> out(a->numel());
    kern::softmax_rows(rows, cols, a->data.data(), out.data());
    auto t = new_node<T>(a->shape, std::move(out), "softmax_lastdim", {a});
    if (!t->requires_grad) return t;
    Tensor<T>* ta = a.get();
    t->backprop = [ta, rows, cols](Tensor<T>& self) {
        ta->ensure_grad();
        const T* y = self.data.data();
        const T* g = self.grad.data();
        T* d = ta->grad.data();
#pragma omp parallel for schedule(static) if(rows > 48)
        for (std::int64_t i = 0; i < rows; ++i) {
            const T* yr = y + i * cols;
            const T* gr = g + i * cols;
            T* dr = d + i * cols;
            T dot = 0;
            for (std::int64_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
            for (std::int64_t j = 0; j < cols; ++j) dr[j] += yr[j] * (gr[j] - dot);
        }
    };
    return t;
}

template <class T>
TensorPtr<T> layernorm_lastdim(const TensorPtr<T>& a, double eps) {
    const std::int64_t rows = a->rows(), cols = a->cols();
    std::vector<T> out(a->numel());
    std::vector<T> stash(2 * rows);
    kern::layernorm_rows(rows, cols, static_cast<T>(eps), a->data.data(), out.data(),
                         stash.data(), stash.data() + rows);
    auto t = new_node<T>(a->shape, std::move(out), "layernorm", {a});
    if (!t->requires_grad) return t;
    t->saved = std::move(stash);
    Tensor<T>* ta = a.get();
    t->backprop = [ta, rows, cols](Tensor<T>& self) {
        ta->ensure_grad();
        const T* y = self.data.data();
        const T* g = self.grad.data();
        const T* inv_std = self.saved.data() + rows;
        T* d = ta->grad.data();
#pragma omp parallel for schedule(static) if(rows > 48)
        for (std::int64_t i = 0; i < rows; ++i) {
            const T* yr = y + i * cols;
            const T* gr = g + i * cols;
            T* dr = d + i * cols;
            T mg = 0, mgy = 0;
            for (std::int64_t j = 0; j < cols; ++j) {
                mg += gr[j];
                mgy += gr[j] * yr[j];
            }
            mg /= static_cast<T>(cols);
            mgy /= static_cast<T>(cols);
            const T is = inv_std[i];
            for (std::int64_t j = 0; j < cols; ++j)
                dr[j] += is * (gr[j] - mg - yr[j] * mgy);
        }
    };
    return t;
}

template <class T>
inline constexpr T kGeluC0 = T(0.7978845608028654);  // sqrt(2/pi)
template <class T>
inline constexpr T kGeluC1 = T(0.044715);

template <class T>
TensorPtr<T> activation(const TensorPtr<T>& a, Act kind) {
    const std::int64_t n = a->numel();
    std::vector<T> out(n);
    const T* x = a->data.data();
    const T c0 = kGeluC0<T>;
    const T c1 = kGeluC1<T>;
    if (kind == Act::relu) {
#pragma omp parallel for schedule(static) if(n > 4096)
        for (std::int64_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    } else {
#pragma omp parallel for simd schedule(static) if(n > 4096)
        for (std::int64_t i = 0; i < n; ++i) {
            const T u = c0 * (x[i] + c1 * x[i] * x[i] * x[i]);
            out[i] = T(0.5) * x[i] * (T(1) + kern::tanh_approx(u));
        }
    }
    auto t = new_node<T>(a->shape, std::move(out), kind == Act::relu ? "relu" : "gelu", {a});
    if (!t->requires_grad) return t;
    Tensor<T>* ta = a.get();
    t->backprop = [ta, kind](Tensor<T>& self) {
        ta->ensure_grad();
        const T* x = ta->data.data();
        const T* g = self.grad.data();
        T* d = ta->grad.data();
        const std::int64_t n = self.numel();
        const T c0 = kGeluC0<T>;
        const T c1 = kGeluC1<T>;
        if (kind == Act::relu) {
#pragma omp parallel for schedule(static) if(n > 4096)
            for (std::int64_t i = 0; i < n; ++i) d[i] += x[i] > T(0) ? g[i] : T(0);
        } else {
#pragma omp parallel for simd schedule(static) if(n > 4096)
            for (std::int64_t i = 0; i < n; ++i) {
                const T u = c0 * (x[i] + c1 * x[i] * x[i] * x[i]);
                const T th = kern::tanh_approx(u);
                const T sech2 = T(1) - th * th;
                const T du = c0 * (T(1) + T(3) * c1 * x[i] * x[i]);
                d[i] += g[i] * (T(0.5) * (T(1) + th) + T(0.5) * x[i] * sech2 * du);
            }
        }
    };
    return t;
}

template <class T>
TensorPtr<T> tanh_op(const TensorPtr<T>& a) {
    const std::int64_t n = a->numel();
    std::vector<T> out(n);
    const T* x = a->data.data();
#pragma omp parallel for simd schedule(static) if(n > 4096)
    for (std::int64_t i = 0; i < n; ++i) out[i] = kern::tanh_approx(x[i]);
    auto t = new_node<T>(a->shape, std::move(out), "tanh", {a});
    if (!t->requires_grad) return t;
    Tensor<T>* ta = a.get();
    t->backprop = [ta](Tensor<T>& self) {
        ta->ensure_grad();
        const T* y = self.data.data();
        const T* g = self.grad.data();
        T* d = ta->grad.data();
        const std::int64_t n = self.numel();
#pragma omp parallel for schedule(static) if(n > 4096)
        for (std::int64_t i = 0; i < n; ++i) d[i] += g[i] * (T(1) - y[i] * y[i]);
    };
    return t;
}

template <class T>
TensorPtr<T> concat_lastdim(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape.size() != b->shape.size() || a->shape.empty())
        throw ShapeError("concat_lastdim: rank mismatch " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
    for (std::size_t i = 0; i + 1 < a->shape.size(); ++i)
        if (a->shape[i] != b->shape[i])
            throw ShapeError("concat_lastdim: leading dims differ, " + shape_str(a->shape) +
                             " vs " + shape_str(b->shape));
    const std::int64_t rows = a->rows(), ca = a->cols(), cb = b->cols();
    Shape oshape = a->shape;
    oshape.back() = ca + cb;
    std::vector<T> out(rows * (ca + cb));
    const T* pa = a->data.data();
    const T* pb = b->data.data();
#pragma omp parallel for schedule(static) if(rows > 48)
    for (std::int64_t i = 0; i < rows; ++i) {
        std::memcpy(out.data() + i * (ca + cb), pa + i * ca, ca * sizeof(T));
        std::memcpy(out.data() + i * (ca + cb) + ca, pb + i * cb, cb * sizeof(T));
    }
    auto t = new_node<T>(std::move(oshape), std::move(out), "concat_lastdim", {a, b});
    if (!t->requires_grad) return t;
    Tensor<T>* ta = a.get();
    Tensor<T>* tb = b.get();
    t->backprop = [ta, tb, rows, ca, cb](Tensor<T>& self) {
        const T* g = self.grad.data();
        if (ta->requires_grad) {
            ta->ensure_grad();
            T* d = ta->grad.data();
#pragma omp parallel for schedule(static) if(rows > 48)
            for (std::int64_t i = 0; i < rows; ++i)
                for (std::int64_t j = 0; j < ca; ++j) d[i * ca + j] += g[i * (ca + cb) + j];
        }
        if (tb->requires_grad) {
            tb->ensure_grad();
            T* d = tb->grad.data();
#pragma omp parallel for schedule(static) if(rows > 48)
            for (std::int64_t i = 0; i < rows; ++i)
                for (std::int64_t j = 0; j < cb; ++j)
                    d[i * cb + j] += g[i * (ca + cb) + ca + j];
        }
    };
    return t;
}

namespace {
template <class T>
TensorPtr<T> reduce_all(const TensorPtr<T>& a, bool take_mean) {
    const std::int64_t n = a->numel();
    const T* x = a->data.data();
    // Sequential accumulation keeps reductions bitwise reproducible.
    T acc = 0;
    for (std::int64_t i = 0; i < n; ++i) acc += x[i];
    if (take_mean) acc /= static_cast<T>(n);
    auto t = new_node<T>({1}, {acc}, take_mean ? "mean" : "sum", {a});
    if (!t->requires_grad) return t;
    Tensor<T>* ta = a.get();
    t->backprop = [ta, n, take_mean](Tensor<T>& self) {
        ta->ensure_grad();
        const T gv = take_mean ? self.grad[0] / static_cast<T>(n) : self.grad[0];
        T* d = ta->grad.data();
#pragma omp parallel for schedule(static) if(n > 4096)
        for (std::int64_t i = 0; i < n; ++i) d[i] += gv;
    };
    return t;
}
}  // namespace

template <class T>
TensorPtr<T> sum_all(const TensorPtr<T>& a) {
    return reduce_all(a, false);
}
template <class T>
TensorPtr<T> mean_all(const TensorPtr<T>& a) {
    return reduce_all(a, true);
}

template <class T>
TensorPtr<T> abs_op(const TensorPtr<T>& a) {
    const std::int64_t n = a->numel();
    std::vector<T> out(n);
    const T* x = a->data.data();
#pragma omp parallel for schedule(static) if(n > 4096)
    for (std::int64_t i = 0; i < n; ++i) out[i] = std::abs(x[i]);
    auto t = new_node<T>(a->shape, std::move(out), "abs", {a});
    if (!t->requires_grad) return t;
    Tensor<T>* ta = a.get();
    t->backprop = [ta](Tensor<T>& self) {
        ta->ensure_grad();
        const T* x = ta->data.data();
        const T* g = self.grad.data();
        T* d = ta->grad.data();
        const std::int64_t n = self.numel();
#pragma omp parallel for schedule(static) if(n > 4096)
        for (std::int64_t i = 0; i < n; ++i)
            d[i] += x[i] > T(0) ? g[i] : (x[i] < T(0) ? -g[i] : T(0));
    };
    return t;
}

template <class T>
TensorPtr<T> l2_normalize_lastdim(const TensorPtr<T>& a, double eps) {
    const std::int64_t rows = a->rows(), cols = a->cols();
    std::vector<T> out(a->numel());
    std::vector<T> norms(rows);
    const T* x = a->data.data();
    const T ev = static_cast<T>(eps);
#pragma omp parallel for schedule(static) if(rows > 48)
    for (std::int64_t i = 0; i < rows; ++i) {
        const T* xr = x + i * cols;
        T s = 0;
        for (std::int64_t j = 0; j < cols; ++j) s += xr[j] * xr[j];
        const T nrm = std::sqrt(s);
        norms[i] = nrm;
        const T inv = T(1) / std::max(nrm, ev);
        for (std::int64_t j = 0; j < cols; ++j) out[i * cols + j] = xr[j] * inv;
    }
    auto t = new_node<T>(a->shape, std::move(out), "l2norm_lastdim", {a});
    if (!t->requires_grad) return t;
    t->saved = std::move(norms);
    Tensor<T>* ta = a.get();
    t->backprop = [ta, rows, cols, ev](Tensor<T>& self) {
        ta->ensure_grad();
        const T* y = self.data.data();
        const T* g = self.grad.data();
        const T* nrm = self.saved.data();
        T* d = ta->grad.data();
#pragma omp parallel for schedule(static) if(rows > 48)
        for (std::int64_t i = 0; i < rows; ++i) {
            const T* yr = y + i * cols;
            const T* gr = g + i * cols;
            T* dr = d + i * cols;
            if (nrm[i] > ev) {
                T dot = 0;
                for (std::int64_t j = 0; j < cols; ++j) dot += yr[j] * gr[j];
                const T inv = T(1) / nrm[i];
                for (std::int64_t j = 0; j < cols; ++j)
                    dr[j] += (gr[j] - yr[j] * dot) * inv;
            } else {
                const T inv = T(1) / ev;
                for (std::int64_t j = 0; j < cols; ++j) dr[j] += gr[j] * inv;
            }
        }
    };
    return t;
}

template <class T>
TensorPtr<T> slice_lastdim(const TensorPtr<T>& a, std::int64_t begin, std::int64_t end) {
    const std::int64_t cols = a->cols();
    if (begin < 0 || end > cols || begin >= end)
        throw ShapeError("slice: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for last dim " +
                         std::to_string(cols));
    const std::int64_t rows = a->rows(), w = end - begin;
    Shape oshape = a->shape;
    oshape.back() = w;
    std::vector<T> out(rows * w);
    const T* x = a->data.data();
#pragma omp parallel for schedule(static) if(rows > 48)
    for (std::int64_t i = 0; i < rows; ++i)
        std::memcpy(out.data() + i * w, x + i * cols + begin, w * sizeof(T));
    auto t = new_node<T>(std::move(oshape), std::move(out), "slice", {a});
    if (!t->requires_grad) return t;
    Tensor<T>* ta = a.get();
    t->backprop = [ta, rows, cols, begin, w](Tensor<T>& self) {
        ta->ensure_grad();
        const T* g = self.grad.data();
        T* d = ta->grad.data();
#pragma omp parallel for schedule(static) if(rows > 48)
        for (std::int64_t i = 0; i < rows; ++i)
            for (std::int64_t j = 0; j < w; ++j) d[i * cols + begin + j] += g[i * w + j];
    };
    return t;
}

template <class T>
TensorPtr<T> reshape(const TensorPtr<T>& a, Shape new_shape) {
    if (numel(new_shape) != a->numel())
        throw ShapeError("reshape: " + shape_str(a->shape) + " -> " + shape_str(new_shape) +
                         " changes element count");
    auto t = new_node<T>(std::move(new_shape), a->data, "reshape", {a});
    if (!t->requires_grad) return t;
    Tensor<T>* ta = a.get();
    t->backprop = [ta](Tensor<T>& self) {
        accumulate_flat(*ta, self.grad.data(), self.numel());
    };
    return t;
}

template <class T>
TensorPtr<T> transpose_last2(const TensorPtr<T>& a) {
    if (a->shape.size() < 2)
        throw ShapeError("transpose_last2: needs rank >= 2, got " + shape_str(a->shape));
    const std::int64_t r = a->shape[a->shape.size() - 2], c = a->shape.back();
    const std::int64_t batch = a->numel() / (r * c);
    Shape oshape = a->shape;
    std::swap(oshape[oshape.size() - 2], oshape.back());
    std::vector<T> out(a->numel());
    for (std::int64_t bi = 0; bi < batch; ++bi)
        kern::transpose2d(r, c, a->data.data() + bi * r * c, out.data() + bi * r * c);
    auto t = new_node<T>(std::move(oshape), std::move(out), "transpose_last2", {a});
    if (!t->requires_grad) return t;
    Tensor<T>* ta = a.get();
    t->backprop = [ta, r, c, batch](Tensor<T>& self) {
        ta->ensure_grad();
        std::vector<T> tmp(r * c);
        for (std::int64_t bi = 0; bi < batch; ++bi) {
            kern::transpose2d(c, r, self.grad.data() + bi * r * c, tmp.data());
            T* d = ta->grad.data() + bi * r * c;
            const std::int64_t n = r * c;
#pragma omp parallel for schedule(static) if(n > 4096)
            for (std::int64_t i = 0; i < n; ++i) d[i] += tmp[i];
        }
    };
    return t;
}

template <class T>
TensorPtr<T> embedding_rows(const TensorPtr<T>& table, std::vector<std::int64_t> idx) {
    if (table->shape.size() != 2)
        throw ShapeError("embedding_lookup: table must be rank 2, got " +
                         shape_str(table->shape));
    const std::int64_t v = table->shape[0], c = table->shape[1];
    for (std::int64_t i : idx)
        if (i < 0 || i >= v)
            throw ShapeError("embedding_lookup: index " + std::to_string(i) +
                             " out of range [0, " + std::to_string(v) + ")");
    const std::int64_t n = static_cast<std::int64_t>(idx.size());
    std::vector<T> out(n * c);
    for (std::int64_t i = 0; i < n; ++i)
        std::memcpy(out.data() + i * c, table->data.data() + idx[i] * c, c * sizeof(T));
    auto t = new_node<T>({n, c}, std::move(out), "embedding_lookup", {table});
    if (!t->requires_grad) return t;
    t->saved_idx = std::move(idx);
    Tensor<T>* tt = table.get();
    t->backprop = [tt, c](Tensor<T>& self) {
        tt->ensure_grad();
        const T* g = self.grad.data();
        for (std::size_t i = 0; i < self.saved_idx.size(); ++i) {
            T* d = tt->grad.data() + self.saved_idx[i] * c;
            for (std::int64_t j = 0; j < c; ++j) d[j] += g[i * c + j];
        }
    };
    return t;
}

template <class T>
void backward(const TensorPtr<T>& loss, bool release) {
    if (!loss) throw ShapeError("backward: null loss");
    if (loss->numel() != 1)
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss->shape));
    if (!loss->requires_grad) return;

    // Post-order DFS: parents land before children, so the reverse walk
    // visits children before their parents.
    std::vector<Tensor<T>*> order;
    std::unordered_set<Tensor<T>*> seen;
    struct Frame {
        Tensor<T>* node;
        std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.get(), 0});
    seen.insert(loss.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->parents.size()) {
            Tensor<T>* p = f.node->parents[f.next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    // Transient (non-leaf) grads start fresh each pass; leaf grads accumulate
    // across passes.
    for (Tensor<T>* t : order)
        if (t->backprop) t->zero_grad();

    loss->retain = true;
    loss->ensure_grad();
    loss->grad[0] += T(1);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor<T>* t = *it;
        if (!t->backprop) continue;
        t->backprop(*t);
        if (release && !t->retain) {
            t->data = {};
            t->grad = {};
            t->saved = {};
        }
    }
}

double grad_check(const std::function<TensorPtr<double>(const TensorPtr<double>&)>& f,
                  const TensorPtr<double>& x, double eps) {
    const bool was_rg = x->requires_grad;
    x->requires_grad = true;
    x->zero_grad();
    auto loss = f(x);
    backward(loss);
    std::vector<double> analytic = x->grad;
    x->requires_grad = false;
    double max_rel = 0.0;
    for (std::int64_t i = 0; i < x->numel(); ++i) {
        const double orig = x->data[i];
        x->data[i] = orig + eps;
        const double fp = f(x)->item();
        x->data[i] = orig - eps;
        const double fm = f(x)->item();
        x->data[i] = orig;
        const double central = (fp - fm) / (2.0 * eps);
        const double denom = std::max({std::abs(analytic[i]), std::abs(central), 1e-8});
        max_rel = std::max(max_rel, std::abs(analytic[i] - central) / denom);
    }
    x->requires_grad = was_rg;
    return max_rel;
}

double grad_check_params(const std::function<TensorPtr<double>()>& f,
                         const std::vector<TensorPtr<double>>& params, double eps) {
    double max_rel = 0.0;
    for (const auto& p : params) {
        auto g = [&](const TensorPtr<double>&) { return f(); };
        max_rel = std::max(max_rel, grad_check(g, p, eps));
    }
    return max_rel;
}

template <class T>
TensorPtr<T> primitive_forward(const std::string& op_name,
                               const std::vector<TensorPtr<T>>& in, const PrimAttrs& a) {
    auto want = [&](std::size_t n) {
        if (in.size() != n)
            throw ShapeError("primitive '" + op_name + "' wants " + std::to_string(n) +
                             " inputs, got " + std::to_string(in.size()));
    };
    if (op_name == "matmul") {
        want(2);
        return matmul(in[0], in[1], a.alpha);
    }
    if (op_name == "add") {
        want(2);
        return add(in[0], in[1]);
    }
    if (op_name == "mul") {
        want(2);
        return mul(in[0], in[1]);
    }
    if (op_name == "sub") {
        want(2);
        return sub(in[0], in[1]);
    }
    if (op_name == "scale") {
        want(1);
        return scale(in[0], a.scalar);
    }
    if (op_name == "softmax_lastdim") {
        want(1);
        return softmax_lastdim(in[0]);
    }
    if (op_name == "layernorm") {
        want(1);
        return layernorm_lastdim(in[0], a.eps);
    }
    if (op_name == "relu_or_gelu") {
        want(1);
        if (a.kind != "relu" && a.kind != "gelu")
            throw ShapeError("relu_or_gelu: unknown kind '" + a.kind + "'");
        return activation(in[0], a.kind == "relu" ? Act::relu : Act::gelu);
    }
    if (op_name == "tanh") {
        want(1);
        return tanh_op(in[0]);
    }
    if (op_name == "concat_lastdim") {
        want(2);
        return concat_lastdim(in[0], in[1]);
    }
    if (op_name == "sum") {
        want(1);
        return sum_all(in[0]);
    }
    if (op_name == "mean") {
        want(1);
        return mean_all(in[0]);
    }
    if (op_name == "abs") {
        want(1);
        return abs_op(in[0]);
    }
    if (op_name == "l2norm_lastdim") {
        want(1);
        return l2_normalize_lastdim(in[0], a.eps);
    }
    if (op_name == "slice") {
        want(1);
        return slice_lastdim(in[0], a.begin, a.end);
    }
    if (op_name == "reshape") {
        want(1);
        return reshape(in[0], a.shape);
    }
    if (op_name == "transpose_last2") {
        want(1);
        return transpose_last2(in[0]);
    }
    if (op_name == "embedding_lookup") {
        want(1);
        return embedding_rows(in[0], a.indices);
    }
    throw ShapeError("unknown primitive '" + op_name + "'");
}

std::vector<std::string> primitive_names() {
    return {"matmul", "add",           "mul",     "sub",   "scale",
            "softmax_lastdim", "layernorm", "relu_or_gelu", "tanh", "concat_lastdim",
            "sum",    "mean",          "abs",     "l2norm_lastdim", "slice",
            "reshape", "transpose_last2", "embedding_lookup"};
}

#define VCE_INSTANTIATE_TENSOR(T)                                                          \
    template struct Tensor<T>;                                                             \
    template TensorPtr<T> make_tensor<T>(Shape, std::vector<T>, bool);                     \
    template TensorPtr<T> zeros<T>(const Shape&, bool);                                    \
    template TensorPtr<T> full<T>(const Shape&, T, bool);                                  \
    template TensorPtr<T> randn<T>(const Shape&, Rng&, double, bool);                      \
    template TensorPtr<T> matmul<T>(const TensorPtr<T>&, const TensorPtr<T>&, double);     \
    template TensorPtr<T> add<T>(const TensorPtr<T>&, const TensorPtr<T>&);                \
    template TensorPtr<T> sub<T>(const TensorPtr<T>&, const TensorPtr<T>&);                \
    template TensorPtr<T> mul<T>(const TensorPtr<T>&, const TensorPtr<T>&);                \
    template TensorPtr<T> scale<T>(const TensorPtr<T>&, double);                           \
    template TensorPtr<T> softmax_lastdim<T>(const TensorPtr<T>&);                         \
    template TensorPtr<T> layernorm_lastdim<T>(const TensorPtr<T>&, double);               \
    template TensorPtr<T> activation<T>(const TensorPtr<T>&, Act);                         \
    template TensorPtr<T> tanh_op<T>(const TensorPtr<T>&);                                 \
    template TensorPtr<T> concat_lastdim<T>(const TensorPtr<T>&, const TensorPtr<T>&);     \
    template TensorPtr<T> sum_all<T>(const TensorPtr<T>&);                                 \
    template TensorPtr<T> mean_all<T>(const TensorPtr<T>&);                                \
    template TensorPtr<T> abs_op<T>(const TensorPtr<T>&);                                  \
    template TensorPtr<T> l2_normalize_lastdim<T>(const TensorPtr<T>&, double);            \
    template TensorPtr<T> slice_lastdim<T>(const TensorPtr<T>&, std::int64_t,              \
                                           std::int64_t);                                  \
    template TensorPtr<T> reshape<T>(const TensorPtr<T>&, Shape);                          \
    template TensorPtr<T> transpose_last2<T>(const TensorPtr<T>&);                         \
    template TensorPtr<T> embedding_rows<T>(const TensorPtr<T>&,                           \
                                            std::vector<std::int64_t>);                    \
    template void backward<T>(const TensorPtr<T>&, bool);                                  \
    template TensorPtr<T> primitive_forward<T>(const std::string&,                         \
                                               const std::vector<TensorPtr<T>>&,           \
                                               const PrimAttrs&);

VCE_INSTANTIATE_TENSOR(float)
VCE_INSTANTIATE_TENSOR(double)

}  // namespace vce
