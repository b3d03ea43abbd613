#pragma once

#include <vector>

#include "volume.hpp"

namespace vce {

// Lossless bridge between voxel space and token space. Patchify is a pure
// rearrangement: one token per (p_d, p_h, p_w) block, channel dim
// C = p_d*p_h*p_w, token rows in C-order (d slowest, w fastest).

struct PatchDims {
    std::int64_t d = 2, h = 8, w = 8;
    std::int64_t volume() const { return d * h * w; }
};

template <class T>
struct TokenSeqT {
    std::vector<T> values;  // n x c row-major
    std::int64_t n = 0, c = 0;
    Dims3 grid{0, 0, 0};  // tokens per axis (d, h, w)
};
using TokenSeq = TokenSeqT<float>;

using TokenLabels = std::vector<int>;

// Fixed affine map: -1024 -> -1, 3071 -> +1 (clips first).
float normalize_hu_value(float hu);
float denormalize_hu_value(float normalized);
std::vector<float> normalize_hu(const Volume& vol);
Volume denormalize_hu(const std::vector<float>& values, const Dims3& shape,
                      const std::array<double, 3>& spacing_mm, Phase phase);

Dims3 token_grid_for(const Dims3& shape, const PatchDims& patch);

template <class T>
TokenSeqT<T> patchify(const std::vector<T>& grid_values, const Dims3& shape,
                      const PatchDims& patch);
template <class T>
std::vector<T> unpatchify(const TokenSeqT<T>& tokens, const PatchDims& patch,
                          const Dims3& shape);

// Majority vote per patch; ties prefer the non-zero label with the larger
// count, then the smaller label id.
TokenLabels downsample_labels(const LabelVolume& labels, const PatchDims& patch);

// Arithmetic mean per patch.
std::vector<float> downsample_weights(const std::vector<float>& weights, const Dims3& shape,
                                      const PatchDims& patch);

}  // namespace vce
