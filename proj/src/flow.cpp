#include "flow.hpp"

#include "kernels.hpp"

namespace vce {

namespace {
template <class T>
void check_tokens_match(const TokenSeqT<T>& a, const TokenSeqT<T>& b, const char* op) {
    if (a.n != b.n || a.c != b.c || a.grid != b.grid)
        throw ShapeError(std::string(op) + ": token sequences differ, " +
                         std::to_string(a.n) + "x" + std::to_string(a.c) + " vs " +
                         std::to_string(b.n) + "x" + std::to_string(b.c));
}
}  // namespace

template <class T>
FlowSampleT<T> make_flow_sample(const TokenSeqT<T>& z_ce, const TokenSeqT<T>& z_eps,
                                double t) {
    check_tokens_match(z_ce, z_eps, "make_flow_sample");
    if (t < 0.0 || t > 1.0)
        throw ConfigError("make_flow_sample: t = " + std::to_string(t) + " outside [0, 1]");
    FlowSampleT<T> s;
    s.z_ce = z_ce;
    s.z_eps = z_eps;
    s.t = t;
    s.z_t = z_ce;
    s.v = z_ce;
    const T tv = static_cast<T>(t);
    const T uv = static_cast<T>(1.0 - t);
    const std::int64_t n = static_cast<std::int64_t>(z_ce.values.size());
#pragma omp parallel for schedule(static) if(n > 4096)
    for (std::int64_t i = 0; i < n; ++i) {
        s.z_t.values[i] = tv * z_ce.values[i] + uv * z_eps.values[i];
        s.v.values[i] = z_ce.values[i] - z_eps.values[i];
    }
    return s;
}

template <class T>
TensorPtr<T> fm_loss(const TensorPtr<T>& pred_v, const TensorPtr<T>& target_v) {
    if (pred_v->shape != target_v->shape)
        throw ShapeError("fm_loss: shapes differ, " + shape_str(pred_v->shape) + " vs " +
                         shape_str(target_v->shape));
    auto diff = sub(pred_v, target_v);
    return mean_all(mul(diff, diff));
}

template <class T>
TokenSeqT<T> gaussian_tokens(const TokenSeqT<T>& like, Rng& rng) {
    TokenSeqT<T> out = like;
    rng.fill_normal(out.values.data(), static_cast<std::int64_t>(out.values.size()));
    return out;
}

template <class T>
TokenSeqT<T> euler_sample(const VelocityModel<T>& model, const TokenSeqT<T>& z_nc, int steps,
                          std::uint64_t seed) {
    if (steps < 1) throw ConfigError("euler_sample: steps must be >= 1");
    Rng rng(seed);
    TokenSeqT<T> z = gaussian_tokens(z_nc, rng);
    const T dt = static_cast<T>(1.0 / static_cast<double>(steps));
    for (int i = 0; i < steps; ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(steps);
        TokenSeqT<T> v = model(z, z_nc, t);
        check_tokens_match(z, v, "euler_sample");
        if (!kern::all_finite(v.values.data(), static_cast<std::int64_t>(v.values.size())))
            throw NumericError("euler_sample: non-finite velocity at step " +
                               std::to_string(i) + " of " + std::to_string(steps));
        const std::int64_t n = static_cast<std::int64_t>(z.values.size());
#pragma omp parallel for schedule(static) if(n > 4096)
        for (std::int64_t j = 0; j < n; ++j) z.values[j] += dt * v.values[j];
    }
    return z;
}

template <class T>
TensorPtr<T> tokens_to_tensor(const TokenSeqT<T>& tokens, bool requires_grad) {
    return make_tensor<T>({tokens.n, tokens.c}, tokens.values, requires_grad);
}

#define VCE_INSTANTIATE_FLOW(T)                                                            \
    template FlowSampleT<T> make_flow_sample<T>(const TokenSeqT<T>&, const TokenSeqT<T>&, \
                                                double);                                   \
    template TensorPtr<T> fm_loss<T>(const TensorPtr<T>&, const TensorPtr<T>&);            \
    template TokenSeqT<T> gaussian_tokens<T>(const TokenSeqT<T>&, Rng&);                   \
    template TokenSeqT<T> euler_sample<T>(const VelocityModel<T>&, const TokenSeqT<T>&,    \
                                          int, std::uint64_t);                             \
    template TensorPtr<T> tokens_to_tensor<T>(const TokenSeqT<T>&, bool);

VCE_INSTANTIATE_FLOW(float)
VCE_INSTANTIATE_FLOW(double)

}  // namespace vce
