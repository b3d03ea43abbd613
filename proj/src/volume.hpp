#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "common.hpp"

namespace vce {

// Calibrated HU range kept by every volume in the system.
inline constexpr float kHuMin = -1024.0f;
inline constexpr float kHuMax = 3071.0f;
inline constexpr double kHuRange = 4095.0;  // kHuMax - kHuMin

inline float clip_hu(float v) { return v < kHuMin ? kHuMin : (v > kHuMax ? kHuMax : v); }

enum class Phase { NC = 0, A = 1, V = 2 };

inline const char* phase_name(Phase p) {
    switch (p) {
        case Phase::NC: return "NC";
        case Phase::A: return "A";
        case Phase::V: return "V";
    }
    return "NC";
}

inline Phase phase_from_name(const std::string& s) {
    if (s == "NC") return Phase::NC;
    if (s == "A") return Phase::A;
    if (s == "V") return Phase::V;
    throw FormatError("unknown phase tag '" + s + "' (want NC, A or V)");
}

using Dims3 = std::array<std::int64_t, 3>;  // D, H, W

inline std::int64_t dims_numel(const Dims3& d) { return d[0] * d[1] * d[2]; }

inline std::string dims_str(const Dims3& d) {
    return "(" + std::to_string(d[0]) + ", " + std::to_string(d[1]) + ", " +
           std::to_string(d[2]) + ")";
}

// Dense HU grid, C-order with D slowest.
struct Volume {
    Dims3 shape{0, 0, 0};
    std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};  // z, y, x
    Phase phase = Phase::NC;
    std::vector<float> voxels;

    std::int64_t size() const { return dims_numel(shape); }
    float& at(std::int64_t z, std::int64_t y, std::int64_t x) {
        return voxels[(z * shape[1] + y) * shape[2] + x];
    }
    float at(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return voxels[(z * shape[1] + y) * shape[2] + x];
    }
};

// Integer organ labels, 0 = background / unselected.
struct LabelVolume {
    Dims3 shape{0, 0, 0};
    std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
    std::vector<std::uint8_t> labels;

    std::int64_t size() const { return dims_numel(shape); }
    std::uint8_t at(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return labels[(z * shape[1] + y) * shape[2] + x];
    }
};

inline void check_same_shape(const Volume& a, const Volume& b, const char* op) {
    if (a.shape != b.shape)
        throw ShapeError(std::string(op) + ": volume shapes differ, " + dims_str(a.shape) +
                         " vs " + dims_str(b.shape));
}

}  // namespace vce
