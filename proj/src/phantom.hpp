#pragma once

#include <map>
#include <vector>

#include "volume.hpp"

namespace vce {

// Synthetic multi-phase CT phantoms: ellipsoidal organs on a soft-tissue
// background with bone/air inclusions, per-phase organ enhancement and
// optional respiration-like warping between phases.

struct OrganSpec {
    int label_id = 0;                      // 1..K, contiguous
    std::array<double, 3> center{};       // voxel fractions (z, y, x)
    std::array<double, 3> radii{};        // voxel fractions, each in (0, 0.5]
    double base_hu = 0.0;
    std::map<Phase, double> enhancement_hu;  // keys restricted to {A, V}
};

struct InclusionSpec {
    int count = 0;
    double hu = 0.0;
};

struct PhantomConfig {
    Dims3 shape{64, 64, 64};
    std::array<double, 3> spacing_mm{2.5, 1.0, 1.0};
    std::vector<OrganSpec> organs;
    double background_hu = 0.0;
    InclusionSpec bone{2, 700.0};
    InclusionSpec air{1, -800.0};
    double noise_sigma = 5.0;  // HU
    std::uint64_t seed = 0;

    void validate() const;
};

struct PhantomSample {
    Volume nc;
    std::map<Phase, Volume> phases;  // A and V
    LabelVolume labels;
};

// Deterministic per config/seed. Rejects overlapping organ ellipsoids.
PhantomSample generate_phantom(const PhantomConfig& config);

// Applies a smooth low-frequency displacement field (up to 3 sinusoidal
// modes per axis, peak |displacement| = magnitude_vox) with trilinear
// resampling and edge clamping. magnitude 0 returns the input bitwise.
Volume inject_misalignment(const Volume& vol, double magnitude_vox, std::uint64_t seed);

// Benchmark presets. "easy": noise 5 HU, aligned phases. "hard": noise
// 10 HU plus 1.5 vox residual misalignment on the contrast phases,
// mirroring training on unregistered data.
struct PhantomPreset {
    PhantomConfig config;
    double misalign_vox = 0.0;
};
PhantomPreset easy_preset();
PhantomPreset hard_preset();
PhantomPreset preset_by_name(const std::string& name);

}  // namespace vce
