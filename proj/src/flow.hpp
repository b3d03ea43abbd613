#pragma once

#include <functional>

#include "codec.hpp"
#include "tensor.hpp"

namespace vce {

// Rectified-flow machinery: straight-path interpolation between noise and
// data, the velocity-matching loss, and the Euler sampler that integrates
// the learned velocity field from t=0 (noise) to t=1 (data).

template <class T>
struct FlowSampleT {
    TokenSeqT<T> z_ce;   // data endpoint
    TokenSeqT<T> z_eps;  // noise endpoint
    double t = 0.0;
    TokenSeqT<T> z_t;    // t*z_ce + (1-t)*z_eps
    TokenSeqT<T> v;      // z_ce - z_eps
};
using FlowSample = FlowSampleT<float>;

template <class T>
FlowSampleT<T> make_flow_sample(const TokenSeqT<T>& z_ce, const TokenSeqT<T>& z_eps,
                                double t);

// Mean over all N*C entries of the squared velocity error; differentiable
// through pred.
template <class T>
TensorPtr<T> fm_loss(const TensorPtr<T>& pred_v, const TensorPtr<T>& target_v);

template <class T>
TokenSeqT<T> gaussian_tokens(const TokenSeqT<T>& like, Rng& rng);

template <class T>
using VelocityModel = std::function<TokenSeqT<T>(const TokenSeqT<T>& z,
                                                 const TokenSeqT<T>& z_nc, double t)>;

// z starts from a seeded Gaussian draw; steps uniform Euler updates
// z += (1/steps) * model(z, z_nc, i/steps). Aborts with the step index if
// the model emits non-finite values.
template <class T>
TokenSeqT<T> euler_sample(const VelocityModel<T>& model, const TokenSeqT<T>& z_nc, int steps,
                          std::uint64_t seed);

template <class T>
TensorPtr<T> tokens_to_tensor(const TokenSeqT<T>& tokens, bool requires_grad = false);

}  // namespace vce
