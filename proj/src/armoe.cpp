#include "armoe.hpp"

#include <cmath>

namespace vce {

RoutingMasks build_routing_masks(const TokenLabels& labels, int organ_count) {
    if (organ_count < 1) throw ConfigError("build_routing_masks: organ count must be >= 1");
    RoutingMasks out;
    out.n_tokens = static_cast<std::int64_t>(labels.size());
    out.organ_count = organ_count;
    out.masks.assign(organ_count, std::vector<std::uint8_t>(labels.size(), 0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int s = labels[i];
        if (s < 0 || s > organ_count)
            throw ShapeError("build_routing_masks: label " + std::to_string(s) +
                             " at token " + std::to_string(i) + " outside 0.." +
                             std::to_string(organ_count));
        if (s > 0) out.masks[s - 1][i] = 1;
    }
    return out;
}

template <class T>
ExpertParams<T> init_expert(NamedParams<T>& params, const std::string& prefix,
                            std::int64_t memory_slots, std::int64_t width,
                            std::int64_t ffn_hidden, Rng& rng) {
    const double sd = 0.02;
    ExpertParams<T> e;
    e.memory = params.add(prefix + ".memory", randn<T>({memory_slots, width}, rng, sd));
    e.wq = params.add(prefix + ".wq", randn<T>({width, width}, rng, sd));
    e.wk = params.add(prefix + ".wk", randn<T>({width, width}, rng, sd));
    e.wv = params.add(prefix + ".wv", randn<T>({width, width}, rng, sd));
    e.ffn_w1 = params.add(prefix + ".ffn_w1", randn<T>({width, ffn_hidden}, rng, sd));
    e.ffn_b1 = params.add(prefix + ".ffn_b1", zeros<T>({1, ffn_hidden}));
    e.ffn_w2 = params.add(prefix + ".ffn_w2", randn<T>({ffn_hidden, width}, rng, sd));
    e.ffn_b2 = params.add(prefix + ".ffn_b2", zeros<T>({1, width}));
    for (auto* g : {&e.gate_ffn, &e.gate_mem}) {
        const std::string gp =
            prefix + (g == &e.gate_ffn ? ".gate_ffn" : ".gate_mem");
        g->w1 = params.add(gp + ".w1", randn<T>({width, width}, rng, sd));
        g->b1 = params.add(gp + ".b1", zeros<T>({1, width}));
        g->w2 = params.add(gp + ".w2", zeros<T>({width, width}));
        g->b2 = params.add(gp + ".b2", zeros<T>({1, width}));
    }
    return e;
}

template <class T>
TensorPtr<T> gate_value(const GateNet<T>& g, const TensorPtr<T>& cond) {
    auto h = tanh_op(add(matmul(cond, g.w1), g.b1));
    return add(matmul(h, g.w2), g.b2);
}

template <class T>
TensorPtr<T> expert_forward(const TensorPtr<T>& f_in, const TensorPtr<T>& cond,
                            const std::vector<std::uint8_t>& mask,
                            const ExpertParams<T>& expert) {
    if (f_in->shape.size() != 2)
        throw ShapeError("expert_forward: tokens must be N x C, got " +
                         shape_str(f_in->shape));
    const std::int64_t n = f_in->shape[0], c = f_in->shape[1];
    if (static_cast<std::int64_t>(mask.size()) != n)
        throw ShapeError("expert_forward: mask length " + std::to_string(mask.size()) +
                         " for " + std::to_string(n) + " tokens");

    // FFN branch over all tokens; masking happens at the output.
    auto ffn = add(matmul(activation(add(matmul(f_in, expert.ffn_w1), expert.ffn_b1),
                                     Act::gelu),
                          expert.ffn_w2),
                   expert.ffn_b2);

    // Memory branch: L slots query all tokens, then redistribute.
    auto q = matmul(expert.memory, expert.wq);                      // L x C
    auto kk = matmul(f_in, expert.wk);                              // N x C
    auto vv = matmul(f_in, expert.wv);                              // N x C
    auto att = softmax_lastdim(
        matmul(q, transpose_last2(kk), 1.0 / std::sqrt(static_cast<double>(c))));  // L x N
    auto redistributed = matmul(transpose_last2(att), matmul(att, vv));            // N x C

    auto gated = add(mul(gate_value(expert.gate_ffn, cond), ffn),
                     mul(gate_value(expert.gate_mem, cond), redistributed));

    std::vector<T> mask_col(n);
    for (std::int64_t i = 0; i < n; ++i) mask_col[i] = static_cast<T>(mask[i]);
    return mul(gated, make_tensor<T>({n, 1}, std::move(mask_col)));
}

template <class T>
TensorPtr<T> armoe_forward(const TensorPtr<T>& f_in, const TensorPtr<T>& cond,
                           const RoutingMasks& masks,
                           const std::vector<ExpertParams<T>>& experts) {
    if (static_cast<int>(experts.size()) != masks.organ_count)
        throw ShapeError("armoe_forward: " + std::to_string(experts.size()) +
                         " experts for " + std::to_string(masks.organ_count) + " masks");
    if (f_in->shape.size() != 2 || f_in->shape[0] != masks.n_tokens)
        throw ShapeError("armoe_forward: token count mismatch, features " +
                         shape_str(f_in->shape) + " vs masks " +
                         std::to_string(masks.n_tokens));
    auto out = f_in;
    for (std::size_t k = 0; k < experts.size(); ++k)
        out = add(out, expert_forward(f_in, cond, masks.masks[k], experts[k]));
    return out;
}

#define VCE_INSTANTIATE_ARMOE(T)                                                           \
    template ExpertParams<T> init_expert<T>(NamedParams<T>&, const std::string&,           \
                                            std::int64_t, std::int64_t, std::int64_t,      \
                                            Rng&);                                         \
    template TensorPtr<T> gate_value<T>(const GateNet<T>&, const TensorPtr<T>&);           \
    template TensorPtr<T> expert_forward<T>(const TensorPtr<T>&, const TensorPtr<T>&,      \
                                            const std::vector<std::uint8_t>&,              \
                                            const ExpertParams<T>&);                       \
    template TensorPtr<T> armoe_forward<T>(const TensorPtr<T>&, const TensorPtr<T>&,       \
                                           const RoutingMasks&,                            \
                                           const std::vector<ExpertParams<T>>&);

VCE_INSTANTIATE_ARMOE(float)
VCE_INSTANTIATE_ARMOE(double)

}  // namespace vce
