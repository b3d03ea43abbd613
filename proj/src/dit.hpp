#pragma once

#include "armoe.hpp"
#include "codec.hpp"
#include "flow.hpp"

namespace vce {

// Velocity-field transformer. Input tokens are the channel-concatenation of
// the noisy state Z_t and the NCCT condition Z_NC, projected to width C and
// tagged with a factorized 3-D sinusoidal position code. Blocks are
// pre-norm self-attention + FFN with zero-initialized adaptive scale/shift/
// gate modulation from the timestep+phase embedding; AR-MoE layers sit
// after the blocks listed in moe_block_indices.

struct ModelConfig {
    int depth = 6;
    int width = 128;  // C
    int heads = 4;
    std::array<std::int64_t, 3> patch{4, 8, 8};
    Dims3 token_grid{16, 8, 8};
    std::vector<int> moe_block_indices{2, 3};
    int repa_block_index = 3;
    int memory_slots = 8;  // L
    int organ_count = 3;   // K
    int ffn_mult = 4;
    int repa_channels = 16;  // C_t of the alignment head

    std::int64_t raw_channels() const { return patch[0] * patch[1] * patch[2]; }
    std::int64_t n_tokens() const { return dims_numel(token_grid); }
    PatchDims patch_dims() const { return {patch[0], patch[1], patch[2]}; }
    bool is_moe_block(int i) const {
        for (int b : moe_block_indices)
            if (b == i) return true;
        return false;
    }
    void validate() const;
};

// Deterministic sinusoidal featurizer for t in [0, 1]; width values.
template <class T>
std::vector<T> timestep_embed(double t, std::int64_t width);

template <class T>
struct LinearParams {
    TensorPtr<T> w, b;
};

template <class T>
struct BlockParams {
    LinearParams<T> qkv, attn_out;
    LinearParams<T> ada;  // C -> 6C modulation, zero-init
    LinearParams<T> ffn1, ffn2;
    std::vector<ExpertParams<T>> experts;  // non-empty only on MoE blocks
};

template <class T>
struct DitForward {
    TensorPtr<T> velocity;       // N x C_raw
    TensorPtr<T> tapped;         // N x C, stream state after repa_block_index
    TensorPtr<T> moe_pre;        // set when capture_block >= 0
    TensorPtr<T> moe_post;
    TensorPtr<T> conditioning;   // 1 x C
};

template <class T>
struct DitModel {
    ModelConfig cfg;
    NamedParams<T> params;

    LinearParams<T> input_proj;
    LinearParams<T> tmlp1, tmlp2;
    TensorPtr<T> phase_table;  // 3 x C, rows indexed by Phase
    std::vector<BlockParams<T>> blocks;
    LinearParams<T> ada_head;  // C -> 2C, zero-init
    LinearParams<T> head;      // C -> C_raw, zero-init
    LinearParams<T> repa1, repa2;  // alignment projection C -> C -> C_t
    TensorPtr<T> pos_enc;      // N x C constant

    static DitModel init(const ModelConfig& cfg, std::uint64_t seed);

    DitForward<T> forward(const TokenSeqT<T>& z_t, const TokenSeqT<T>& z_nc, double t,
                          Phase phase, const TokenLabels& labels,
                          int capture_block = -1) const;

    // Student projection into the teacher space (one hidden layer).
    TensorPtr<T> repa_project(const TensorPtr<T>& tapped) const;

    void set_requires_grad(bool on) {
        for (auto& [name, p] : params.items) p->requires_grad = on;
    }
};

}  // namespace vce
