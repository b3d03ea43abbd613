#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "common.hpp"

// Reverse-mode autodiff on dense tensors. The primitive set is closed and
// small; every differentiable computation in the project (DiT blocks,
// expert routing, alignment losses) is composed from it, and every
// primitive is verified against central finite differences in tests.
//
// float is the training dtype; double is the verification dtype used by
// grad_check. Tensors are immutable after creation except for their grad
// buffers; one graph is driven by one thread at a time, independent graphs
// may live on different threads.

namespace vce {

template <class T>
struct Tensor;

template <class T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;  // empty until first needed; numel-sized when live

    // Graph bookkeeping (empty for leaves).
    std::vector<TensorPtr<T>> parents;
    std::function<void(Tensor&)> backprop;
    const char* op = "leaf";
    std::vector<T> saved;                  // op-specific stash for backward
    std::vector<std::int64_t> saved_idx;   // embedding indices
    bool retain = false;  // keep buffers through a releasing backward

    std::int64_t numel() const { return vce::numel(shape); }
    std::int64_t cols() const { return shape.empty() ? 1 : shape.back(); }
    std::int64_t rows() const { return numel() / cols(); }

    void ensure_grad() {
        if (static_cast<std::int64_t>(grad.size()) != numel()) grad.assign(numel(), T(0));
    }
    void zero_grad() { grad.assign(numel(), T(0)); }
    T item() const {
        if (numel() != 1) throw ShapeError("item(): tensor is not scalar");
        return data[0];
    }
};

enum class Act { relu, gelu };

template <class T>
TensorPtr<T> make_tensor(Shape shape, std::vector<T> data, bool requires_grad = false);
template <class T>
TensorPtr<T> zeros(const Shape& shape, bool requires_grad = false);
template <class T>
TensorPtr<T> full(const Shape& shape, T value, bool requires_grad = false);
template <class T>
TensorPtr<T> randn(const Shape& shape, Rng& rng, double stddev = 1.0,
                   bool requires_grad = false);

// Primitives. Binary elementwise ops broadcast trailing dimensions of size 1
// (row vectors over rows, column vectors over channels); nothing wider.
template <class T>
TensorPtr<T> matmul(const TensorPtr<T>& a, const TensorPtr<T>& b, double alpha = 1.0);
template <class T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b);
template <class T>
TensorPtr<T> sub(const TensorPtr<T>& a, const TensorPtr<T>& b);
template <class T>
TensorPtr<T> mul(const TensorPtr<T>& a, const TensorPtr<T>& b);
template <class T>
TensorPtr<T> scale(const TensorPtr<T>& a, double s);
template <class T>
TensorPtr<T> softmax_lastdim(const TensorPtr<T>& a);
template <class T>
TensorPtr<T> layernorm_lastdim(const TensorPtr<T>& a, double eps = 1e-5);
template <class T>
TensorPtr<T> activation(const TensorPtr<T>& a, Act kind);
template <class T>
TensorPtr<T> tanh_op(const TensorPtr<T>& a);
template <class T>
TensorPtr<T> concat_lastdim(const TensorPtr<T>& a, const TensorPtr<T>& b);
template <class T>
TensorPtr<T> sum_all(const TensorPtr<T>& a);
template <class T>
TensorPtr<T> mean_all(const TensorPtr<T>& a);
template <class T>
TensorPtr<T> abs_op(const TensorPtr<T>& a);
template <class T>
TensorPtr<T> l2_normalize_lastdim(const TensorPtr<T>& a, double eps);
template <class T>
TensorPtr<T> slice_lastdim(const TensorPtr<T>& a, std::int64_t begin, std::int64_t end);
template <class T>
TensorPtr<T> reshape(const TensorPtr<T>& a, Shape new_shape);
template <class T>
TensorPtr<T> transpose_last2(const TensorPtr<T>& a);
template <class T>
TensorPtr<T> embedding_rows(const TensorPtr<T>& table, std::vector<std::int64_t> idx);

// String-keyed dispatch over the same primitive set; used by the generic
// per-primitive verification sweeps.
struct PrimAttrs {
    double alpha = 1.0;
    double eps = 1e-5;
    double scalar = 0.0;
    std::string kind = "gelu";
    std::int64_t begin = 0, end = 0;
    Shape shape;
    std::vector<std::int64_t> indices;
};
template <class T>
TensorPtr<T> primitive_forward(const std::string& op_name,
                               const std::vector<TensorPtr<T>>& inputs,
                               const PrimAttrs& attrs);
std::vector<std::string> primitive_names();

// Reverse pass from a scalar loss. Accumulates into leaf grads; repeated
// calls keep accumulating. release=true frees intermediate data/grad buffers
// as soon as they are consumed (training mode).
template <class T>
void backward(const TensorPtr<T>& loss, bool release = false);

// Max relative error between analytic gradient of f at x and central finite
// differences with step eps: |a - c| / max(|a|, |c|, 1e-8).
double grad_check(const std::function<TensorPtr<double>(const TensorPtr<double>&)>& f,
                  const TensorPtr<double>& x, double eps);

// Same check against every tensor in params; f re-evaluates the loss from
// the current parameter values.
double grad_check_params(const std::function<TensorPtr<double>()>& f,
                         const std::vector<TensorPtr<double>>& params, double eps);

// Ordered named parameter registry (checkpoint order = insertion order).
template <class T>
struct NamedParams {
    std::vector<std::pair<std::string, TensorPtr<T>>> items;

    TensorPtr<T> add(const std::string& name, TensorPtr<T> t) {
        t->requires_grad = true;
        t->retain = true;
        items.emplace_back(name, t);
        return items.back().second;
    }
    void zero_grads() {
        for (auto& [name, t] : items) t->zero_grad();
    }
    TensorPtr<T> find(const std::string& name) const {
        for (auto& [n, t] : items)
            if (n == name) return t;
        return nullptr;
    }
};

}  // namespace vce
