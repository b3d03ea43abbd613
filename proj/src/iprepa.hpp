#pragma once

#include "codec.hpp"
#include "tensor.hpp"

namespace vce {

// Intensity-phase aware representation alignment. A deterministic
// patch-statistics teacher stands in for a pretrained encoder: it windows
// volumes to the soft-tissue range, summarizes each token patch with a
// fixed 16-value descriptor and projects it through a seeded random matrix.
// Any extractor producing N x C_t features can be swapped in behind
// TeacherFeatures.

struct AlignConfig {
    double tau_pos = 20.0;  // HU threshold for definite enhancement
    double alpha_enh = 2.0;
    double alpha_mis = 0.1;
    double alpha_bg = 1.0;
    double lambda_int = 0.1;
    double lambda_phase = 1.0;
    std::uint64_t teacher_seed = 1234;
    int teacher_channels = 16;  // C_t
    double eps = 1e-6;          // channel-normalization guard

    bool enabled() const { return lambda_int != 0.0 || lambda_phase != 0.0; }
    void validate() const;
};

inline constexpr double kTeacherWindowLo = -175.0;  // soft-tissue HU window
inline constexpr double kTeacherWindowHi = 275.0;
inline constexpr int kTeacherDescriptor = 16;

// Per-voxel three-way weighting of the difference map ce - nc:
// alpha_enh above tau_pos, alpha_mis below zero, alpha_bg otherwise.
std::vector<float> intensity_weights(const Volume& nc, const Volume& ce,
                                     const AlignConfig& cfg);

// Raw N x 16 patch descriptors on windowed values: mean, std, min, max,
// 8-bin histogram, mean |gradient| per axis, patch-center value.
std::vector<double> teacher_descriptors(const Volume& vol, const PatchDims& patch);

// N x C_t row-major features (descriptors through the seeded projection),
// deterministic per (volume, seed).
template <class T>
std::vector<T> teacher_extract(const Volume& vol, const PatchDims& patch,
                               const AlignConfig& cfg);

template <class T>
struct TeacherFeatures {
    TensorPtr<T> t_nc, t_ce;  // N x C_t constants
    TensorPtr<T> w;           // N x 1 token weights
};

template <class T>
TeacherFeatures<T> make_teacher_features(const Volume& nc, const Volume& ce,
                                         const PatchDims& patch, const AlignConfig& cfg);

// Row-wise division by max(L2 norm, eps).
template <class T>
TensorPtr<T> channel_normalize(const TensorPtr<T>& m, double eps);

// mean |w_n * (N(h) - N(t_ce - t_nc))| over N x C_t entries.
template <class T>
TensorPtr<T> loss_int(const TensorPtr<T>& h, const TeacherFeatures<T>& tf, double eps);

// mean |w_i w_j * (N(h)N(h)^T - N(t_nc)N(t_ce)^T)_ij| over N^2 entries.
template <class T>
TensorPtr<T> loss_phase(const TensorPtr<T>& h, const TeacherFeatures<T>& tf, double eps);

}  // namespace vce
