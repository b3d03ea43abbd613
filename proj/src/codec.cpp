#include "codec.hpp"

#include <algorithm>

namespace vce {

float normalize_hu_value(float hu) {
    const float c = clip_hu(hu);
    return static_cast<float>((c - kHuMin) / kHuRange * 2.0 - 1.0);
}

float denormalize_hu_value(float normalized) {
    return clip_hu(static_cast<float>((normalized + 1.0) / 2.0 * kHuRange + kHuMin));
}

std::vector<float> normalize_hu(const Volume& vol) {
    std::vector<float> out(vol.size());
    const std::int64_t n = vol.size();
#pragma omp parallel for schedule(static) if(n > 4096)
    for (std::int64_t i = 0; i < n; ++i) out[i] = normalize_hu_value(vol.voxels[i]);
    return out;
}

Volume denormalize_hu(const std::vector<float>& values, const Dims3& shape,
                      const std::array<double, 3>& spacing_mm, Phase phase) {
    if (static_cast<std::int64_t>(values.size()) != dims_numel(shape))
        throw ShapeError("denormalize_hu: " + std::to_string(values.size()) +
                         " values for shape " + dims_str(shape));
    Volume v;
    v.shape = shape;
    v.spacing_mm = spacing_mm;
    v.phase = phase;
    v.voxels.resize(values.size());
    const std::int64_t n = v.size();
#pragma omp parallel for schedule(static) if(n > 4096)
    for (std::int64_t i = 0; i < n; ++i) v.voxels[i] = denormalize_hu_value(values[i]);
    return v;
}

Dims3 token_grid_for(const Dims3& shape, const PatchDims& patch) {
    if (patch.d <= 0 || patch.h <= 0 || patch.w <= 0)
        throw ConfigError("patchify: non-positive patch dims");
    if (shape[0] % patch.d || shape[1] % patch.h || shape[2] % patch.w)
        throw ShapeError("patchify: shape " + dims_str(shape) + " not divisible by patch (" +
                         std::to_string(patch.d) + ", " + std::to_string(patch.h) + ", " +
                         std::to_string(patch.w) + ")");
    return {shape[0] / patch.d, shape[1] / patch.h, shape[2] / patch.w};
}

template <class T>
TokenSeqT<T> patchify(const std::vector<T>& grid_values, const Dims3& shape,
                      const PatchDims& patch) {
    if (static_cast<std::int64_t>(grid_values.size()) != dims_numel(shape))
        throw ShapeError("patchify: " + std::to_string(grid_values.size()) +
                         " values for shape " + dims_str(shape));
    const Dims3 g = token_grid_for(shape, patch);
    TokenSeqT<T> out;
    out.grid = g;
    out.n = dims_numel(g);
    out.c = patch.volume();
    out.values.resize(out.n * out.c);
#pragma omp parallel for schedule(static) if(g[0] > 48)
    for (std::int64_t tz = 0; tz < g[0]; ++tz)
        for (std::int64_t ty = 0; ty < g[1]; ++ty)
            for (std::int64_t tx = 0; tx < g[2]; ++tx) {
                const std::int64_t tok = (tz * g[1] + ty) * g[2] + tx;
                T* dst = out.values.data() + tok * out.c;
                for (std::int64_t dz = 0; dz < patch.d; ++dz)
                    for (std::int64_t dy = 0; dy < patch.h; ++dy)
                        for (std::int64_t dx = 0; dx < patch.w; ++dx) {
                            const std::int64_t z = tz * patch.d + dz;
                            const std::int64_t y = ty * patch.h + dy;
                            const std::int64_t x = tx * patch.w + dx;
                            *dst++ = grid_values[(z * shape[1] + y) * shape[2] + x];
                        }
            }
    return out;
}

template <class T>
std::vector<T> unpatchify(const TokenSeqT<T>& tokens, const PatchDims& patch,
                          const Dims3& shape) {
    const Dims3 g = token_grid_for(shape, patch);
    if (tokens.grid != g || tokens.c != patch.volume())
        throw ShapeError("unpatchify: token grid " + dims_str(tokens.grid) + " x " +
                         std::to_string(tokens.c) + " does not match shape " +
                         dims_str(shape));
    std::vector<T> out(dims_numel(shape));
#pragma omp parallel for schedule(static) if(g[0] > 48)
    for (std::int64_t tz = 0; tz < g[0]; ++tz)
        for (std::int64_t ty = 0; ty < g[1]; ++ty)
            for (std::int64_t tx = 0; tx < g[2]; ++tx) {
                const std::int64_t tok = (tz * g[1] + ty) * g[2] + tx;
                const T* src = tokens.values.data() + tok * tokens.c;
                for (std::int64_t dz = 0; dz < patch.d; ++dz)
                    for (std::int64_t dy = 0; dy < patch.h; ++dy)
                        for (std::int64_t dx = 0; dx < patch.w; ++dx) {
                            const std::int64_t z = tz * patch.d + dz;
                            const std::int64_t y = ty * patch.h + dy;
                            const std::int64_t x = tx * patch.w + dx;
                            out[(z * shape[1] + y) * shape[2] + x] = *src++;
                        }
            }
    return out;
}

TokenLabels downsample_labels(const LabelVolume& labels, const PatchDims& patch) {
    const Dims3 g = token_grid_for(labels.shape, patch);
    TokenLabels out(dims_numel(g));
#pragma omp parallel for schedule(static) if(g[0] > 48)
    for (std::int64_t tz = 0; tz < g[0]; ++tz)
        for (std::int64_t ty = 0; ty < g[1]; ++ty)
            for (std::int64_t tx = 0; tx < g[2]; ++tx) {
                std::array<std::int64_t, 256> counts{};
                for (std::int64_t dz = 0; dz < patch.d; ++dz)
                    for (std::int64_t dy = 0; dy < patch.h; ++dy)
                        for (std::int64_t dx = 0; dx < patch.w; ++dx)
                            ++counts[labels.at(tz * patch.d + dz, ty * patch.h + dy,
                                               tx * patch.w + dx)];
                std::int64_t best_count = 0;
                for (const auto c : counts) best_count = std::max(best_count, c);
                // Tie-break: smallest non-zero label at the max count wins
                // over background.
                int winner = 0;
                for (int lbl = 1; lbl < 256; ++lbl)
                    if (counts[lbl] == best_count) {
                        winner = lbl;
                        break;
                    }
                if (winner == 0 && counts[0] != best_count)
                    throw ShapeError("downsample_labels: internal vote error");
                out[(tz * g[1] + ty) * g[2] + tx] = winner;
            }
    return out;
}

std::vector<float> downsample_weights(const std::vector<float>& weights, const Dims3& shape,
                                      const PatchDims& patch) {
    if (static_cast<std::int64_t>(weights.size()) != dims_numel(shape))
        throw ShapeError("downsample_weights: " + std::to_string(weights.size()) +
                         " values for shape " + dims_str(shape));
    const Dims3 g = token_grid_for(shape, patch);
    std::vector<float> out(dims_numel(g));
    const double inv = 1.0 / static_cast<double>(patch.volume());
#pragma omp parallel for schedule(static) if(g[0] > 48)
    for (std::int64_t tz = 0; tz < g[0]; ++tz)
        for (std::int64_t ty = 0; ty < g[1]; ++ty)
            for (std::int64_t tx = 0; tx < g[2]; ++tx) {
                double acc = 0.0;
                for (std::int64_t dz = 0; dz < patch.d; ++dz)
                    for (std::int64_t dy = 0; dy < patch.h; ++dy)
                        for (std::int64_t dx = 0; dx < patch.w; ++dx) {
                            const std::int64_t z = tz * patch.d + dz;
                            const std::int64_t y = ty * patch.h + dy;
                            const std::int64_t x = tx * patch.w + dx;
                            acc += weights[(z * shape[1] + y) * shape[2] + x];
                        }
                out[(tz * g[1] + ty) * g[2] + tx] = static_cast<float>(acc * inv);
            }
    return out;
}

template TokenSeqT<float> patchify<float>(const std::vector<float>&, const Dims3&,
                                          const PatchDims&);
template TokenSeqT<double> patchify<double>(const std::vector<double>&, const Dims3&,
                                            const PatchDims&);
template std::vector<float> unpatchify<float>(const TokenSeqT<float>&, const PatchDims&,
                                              const Dims3&);
template std::vector<double> unpatchify<double>(const TokenSeqT<double>&, const PatchDims&,
                                                const Dims3&);

}  // namespace vce
