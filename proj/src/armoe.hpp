#pragma once

#include "codec.hpp"
#include "tensor.hpp"

namespace vce {

// Anatomy-routed mixture-of-experts. Routing is fully determined by the
// token-wise organ labels: expert k touches exactly the tokens labeled k,
// every other token passes through unchanged. Each expert combines a gated
// FFN branch with a gated memory-attention branch whose L learnable slots
// aggregate features from all tokens and redistribute them (H = A^T (A V)).

struct RoutingMasks {
    std::int64_t n_tokens = 0;
    int organ_count = 0;                            // K
    std::vector<std::vector<std::uint8_t>> masks;   // K vectors of length N
};

RoutingMasks build_routing_masks(const TokenLabels& labels, int organ_count);

template <class T>
struct GateNet {
    TensorPtr<T> w1, b1, w2, b2;  // w2/b2 zero-init: experts are no-ops at start
};

template <class T>
struct ExpertParams {
    TensorPtr<T> memory;          // L x C
    TensorPtr<T> wq, wk, wv;      // C x C
    TensorPtr<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    GateNet<T> gate_ffn, gate_mem;
};

template <class T>
ExpertParams<T> init_expert(NamedParams<T>& params, const std::string& prefix,
                            std::int64_t memory_slots, std::int64_t width,
                            std::int64_t ffn_hidden, Rng& rng);

// 1 x C gate vector from the conditioning embedding.
template <class T>
TensorPtr<T> gate_value(const GateNet<T>& g, const TensorPtr<T>& cond);

// S_k ⊙ (G_ffn(t) ⊙ FFN(F_in) + G_mem(t) ⊙ H); attention keys/values see
// all tokens, only the output is masked.
template <class T>
TensorPtr<T> expert_forward(const TensorPtr<T>& f_in, const TensorPtr<T>& cond,
                            const std::vector<std::uint8_t>& mask,
                            const ExpertParams<T>& expert);

// F_out = F_in + sum_k expert_k; rows with label 0 come back bitwise equal.
template <class T>
TensorPtr<T> armoe_forward(const TensorPtr<T>& f_in, const TensorPtr<T>& cond,
                           const RoutingMasks& masks,
                           const std::vector<ExpertParams<T>>& experts);

}  // namespace vce
