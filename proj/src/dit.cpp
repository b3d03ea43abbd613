#include "dit.hpp"

#include <cmath>

namespace vce {

void ModelConfig::validate() const {
    if (depth < 1) throw ConfigError("model: depth must be >= 1");
    if (width < 2) throw ConfigError("model: width must be >= 2");
    if (heads < 1 || width % heads)
        throw ConfigError("model: heads must divide width, got " + std::to_string(heads) +
                          " for width " + std::to_string(width));
    for (int b : moe_block_indices)
        if (b < 0 || b >= depth)
            throw ConfigError("model: moe block index " + std::to_string(b) +
                              " outside [0, " + std::to_string(depth) + ")");
    if (repa_block_index < 0 || repa_block_index >= depth)
        throw ConfigError("model: repa block index outside [0, depth)");
    if (memory_slots < 1) throw ConfigError("model: memory_slots must be >= 1");
    if (organ_count < 1) throw ConfigError("model: organ_count must be >= 1");
    if (ffn_mult < 1) throw ConfigError("model: ffn_mult must be >= 1");
    if (repa_channels < 1) throw ConfigError("model: repa_channels must be >= 1");
    for (auto p : patch)
        if (p < 1) throw ConfigError("model: patch dims must be >= 1");
    for (auto g : token_grid)
        if (g < 1) throw ConfigError("model: token grid dims must be >= 1");
}

template <class T>
std::vector<T> timestep_embed(double t, std::int64_t width) {
    if (t < 0.0 || t > 1.0)
        throw ConfigError("timestep_embed: t = " + std::to_string(t) + " outside [0, 1]");
    // Diffusion convention: spread t over [0, 1000] against geometric
    // frequencies so nearby timesteps stay distinguishable.
    const std::int64_t half = width / 2;
    std::vector<T> out(width, T(0));
    const double s = 1000.0 * t;
    for (std::int64_t k = 0; k < half; ++k) {
        const double freq =
            std::exp(-std::log(10000.0) * static_cast<double>(k) /
                     std::max<double>(1.0, static_cast<double>(half - 1)));
        out[k] = static_cast<T>(std::cos(s * freq));
        out[half + k] = static_cast<T>(std::sin(s * freq));
    }
    return out;
}

namespace {

// Factorized sinusoidal code: the channel dim is split into three equal
// even-sized chunks, one per grid axis, trailing channels zero.
template <class T>
std::vector<T> position_encoding(const Dims3& grid, std::int64_t width) {
    const std::int64_t n = dims_numel(grid);
    std::vector<T> out(n * width, T(0));
    const std::int64_t per_axis = (width / 3) & ~std::int64_t(1);
    const std::int64_t half = per_axis / 2;
    for (std::int64_t tz = 0; tz < grid[0]; ++tz)
        for (std::int64_t ty = 0; ty < grid[1]; ++ty)
            for (std::int64_t tx = 0; tx < grid[2]; ++tx) {
                const std::int64_t tok = (tz * grid[1] + ty) * grid[2] + tx;
                const std::int64_t coord[3] = {tz, ty, tx};
                for (int a = 0; a < 3; ++a) {
                    T* dst = out.data() + tok * width + a * per_axis;
                    for (std::int64_t k = 0; k < half; ++k) {
                        const double freq =
                            std::exp(-std::log(10000.0) * static_cast<double>(k) /
                                     std::max<double>(1.0, static_cast<double>(half - 1)));
                        dst[k] = static_cast<T>(std::sin(coord[a] * freq));
                        dst[half + k] = static_cast<T>(std::cos(coord[a] * freq));
                    }
                }
            }
    return out;
}

template <class T>
LinearParams<T> init_linear(NamedParams<T>& params, const std::string& name,
                            std::int64_t in, std::int64_t out, Rng& rng, bool zero) {
    LinearParams<T> l;
    l.w = params.add(name + ".w", zero ? zeros<T>({in, out}) : randn<T>({in, out}, rng, 0.02));
    l.b = params.add(name + ".b", zeros<T>({1, out}));
    return l;
}

// The qkv projection is bias-free: a key-side bias shifts every attention
// row by a constant and softmax cancels it, leaving dead parameters.
template <class T>
LinearParams<T> init_linear_nobias(NamedParams<T>& params, const std::string& name,
                                   std::int64_t in, std::int64_t out, Rng& rng) {
    LinearParams<T> l;
    l.w = params.add(name + ".w", randn<T>({in, out}, rng, 0.02));
    return l;
}

template <class T>
TensorPtr<T> linear(const LinearParams<T>& l, const TensorPtr<T>& x) {
    auto y = matmul(x, l.w);
    return l.b ? add(y, l.b) : y;
}

// layernorm(x) * (1 + scale) + shift with 1 x C modulation rows.
template <class T>
TensorPtr<T> modulate(const TensorPtr<T>& x, const TensorPtr<T>& scl,
                      const TensorPtr<T>& shift, const TensorPtr<T>& ones_row) {
    return add(mul(layernorm_lastdim(x), add(scl, ones_row)), shift);
}

template <class T>
TensorPtr<T> self_attention(const TensorPtr<T>& x, const BlockParams<T>& blk, int heads) {
    const std::int64_t c = x->shape[1];
    const std::int64_t dh = c / heads;
    auto qkv = linear(blk.qkv, x);  // N x 3C
    TensorPtr<T> merged;
    for (int h = 0; h < heads; ++h) {
        auto q = slice_lastdim(qkv, h * dh, (h + 1) * dh);
        auto k = slice_lastdim(qkv, c + h * dh, c + (h + 1) * dh);
        auto v = slice_lastdim(qkv, 2 * c + h * dh, 2 * c + (h + 1) * dh);
        auto att = softmax_lastdim(
            matmul(q, transpose_last2(k), 1.0 / std::sqrt(static_cast<double>(dh))));
        auto out = matmul(att, v);
        merged = h == 0 ? out : concat_lastdim(merged, out);
    }
    return linear(blk.attn_out, merged);
}

}  // namespace

template <class T>
DitModel<T> DitModel<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    DitModel<T> m;
    m.cfg = cfg;
    Rng rng(seed);
    const std::int64_t c = cfg.width;
    const std::int64_t craw = cfg.raw_channels();

    m.input_proj = init_linear(m.params, "input_proj", 2 * craw, c, rng, false);
    m.tmlp1 = init_linear(m.params, "tembed.mlp1", c, c, rng, false);
    m.tmlp2 = init_linear(m.params, "tembed.mlp2", c, c, rng, false);
    m.phase_table = m.params.add("phase_table", randn<T>({3, c}, rng, 0.02));

    for (int i = 0; i < cfg.depth; ++i) {
        const std::string p = "block" + std::to_string(i);
        BlockParams<T> blk;
        blk.qkv = init_linear_nobias(m.params, p + ".qkv", c, 3 * c, rng);
        blk.attn_out = init_linear(m.params, p + ".attn_out", c, c, rng, false);
        blk.ada = init_linear(m.params, p + ".ada", c, 6 * c, rng, true);
        blk.ffn1 = init_linear(m.params, p + ".ffn1", c, cfg.ffn_mult * c, rng, false);
        blk.ffn2 = init_linear(m.params, p + ".ffn2", cfg.ffn_mult * c, c, rng, false);
        if (cfg.is_moe_block(i))
            for (int k = 0; k < cfg.organ_count; ++k)
                blk.experts.push_back(init_expert<T>(m.params,
                                                     p + ".expert" + std::to_string(k),
                                                     cfg.memory_slots, c,
                                                     cfg.ffn_mult * c, rng));
        m.blocks.push_back(std::move(blk));
    }
    m.ada_head = init_linear(m.params, "head.ada", c, 2 * c, rng, true);
    m.head = init_linear(m.params, "head.out", c, craw, rng, true);
    m.repa1 = init_linear(m.params, "repa.mlp1", c, c, rng, false);
    m.repa2 = init_linear(m.params, "repa.mlp2", c, cfg.repa_channels, rng, false);

    m.pos_enc = make_tensor<T>({cfg.n_tokens(), c}, position_encoding<T>(cfg.token_grid, c));
    return m;
}

template <class T>
DitForward<T> DitModel<T>::forward(const TokenSeqT<T>& z_t, const TokenSeqT<T>& z_nc,
                                   double t, Phase phase, const TokenLabels& labels,
                                   int capture_block) const {
    const std::int64_t n = cfg.n_tokens();
    const std::int64_t c = cfg.width;
    if (z_t.grid != cfg.token_grid || z_nc.grid != cfg.token_grid)
        throw ShapeError("dit_forward: token grid mismatch, input " + dims_str(z_t.grid) +
                         " vs model " + dims_str(cfg.token_grid));
    if (z_t.c != cfg.raw_channels() || z_nc.c != cfg.raw_channels())
        throw ShapeError("dit_forward: raw channel mismatch");
    if (static_cast<std::int64_t>(labels.size()) != n)
        throw ShapeError("dit_forward: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " tokens");
    if (capture_block >= 0 && !cfg.is_moe_block(capture_block))
        throw ConfigError("dit_forward: block " + std::to_string(capture_block) +
                          " has no AR-MoE layer to capture");

    DitForward<T> out;
    const RoutingMasks masks = build_routing_masks(labels, cfg.organ_count);

    // Conditioning: sinusoidal t features through the MLP, plus the phase row.
    auto c_sin = make_tensor<T>({1, c}, timestep_embed<T>(t, c));
    auto cond = add(linear(tmlp2, activation(linear(tmlp1, c_sin), Act::gelu)),
                    embedding_rows(phase_table, {static_cast<std::int64_t>(phase)}));
    out.conditioning = cond;

    auto ones_row = full<T>({1, c}, T(1));
    auto x = add(linear(input_proj,
                        concat_lastdim(tokens_to_tensor(z_t), tokens_to_tensor(z_nc))),
                 pos_enc);

    for (int i = 0; i < cfg.depth; ++i) {
        const auto& blk = blocks[i];
        auto mod = linear(blk.ada, cond);  // 1 x 6C
        auto s1 = slice_lastdim(mod, 0, c);
        auto h1 = slice_lastdim(mod, c, 2 * c);
        auto g1 = slice_lastdim(mod, 2 * c, 3 * c);
        auto s2 = slice_lastdim(mod, 3 * c, 4 * c);
        auto h2 = slice_lastdim(mod, 4 * c, 5 * c);
        auto g2 = slice_lastdim(mod, 5 * c, 6 * c);

        x = add(x, mul(self_attention(modulate(x, s1, h1, ones_row), blk, cfg.heads), g1));
        auto ffn = linear(blk.ffn2,
                          activation(linear(blk.ffn1, modulate(x, s2, h2, ones_row)),
                                     Act::gelu));
        x = add(x, mul(ffn, g2));

        if (!blk.experts.empty()) {
            if (i == capture_block) out.moe_pre = x;
            x = armoe_forward(x, cond, masks, blk.experts);
            if (i == capture_block) out.moe_post = x;
        }
        if (i == cfg.repa_block_index) out.tapped = x;
    }

    auto mod = linear(ada_head, cond);
    auto xs = modulate(x, slice_lastdim(mod, 0, c), slice_lastdim(mod, c, 2 * c), ones_row);
    out.velocity = linear(head, xs);
    return out;
}

template <class T>
TensorPtr<T> DitModel<T>::repa_project(const TensorPtr<T>& tapped) const {
    return linear(repa2, activation(linear(repa1, tapped), Act::gelu));
}

template std::vector<float> timestep_embed<float>(double, std::int64_t);
template std::vector<double> timestep_embed<double>(double, std::int64_t);
template struct DitModel<float>;
template struct DitModel<double>;

}  // namespace vce
