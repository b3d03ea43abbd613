#pragma once

#include <vector>

#include "volume.hpp"

namespace vce {

// Evaluation metrics over clipped HU volumes. PSNR uses the fixed data
// range 4095 (the clipped HU span) and caps at 100 dB; 3D-SSIM uses a 7^3
// Gaussian window (sigma 1.5), K1=0.01, K2=0.03, averaged over the region
// where the window fits entirely inside the volume.

inline constexpr double kPsnrCapDb = 100.0;
inline constexpr int kSsimWindow = 7;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

double psnr(const Volume& a, const Volume& b);
double ssim3d(const Volume& a, const Volume& b);

struct EnhancementMask {
    Dims3 shape{0, 0, 0};
    double threshold_hu = 20.0;
    std::vector<std::uint8_t> mask;
};

// mask = 1 iff (ce - nc) > threshold, strictly.
EnhancementMask enhancement_mask(const Volume& nc, const Volume& ce, double threshold_hu);

struct OverlapScores {
    double dice = 0.0, recall = 0.0, precision = 0.0;
};

// Empty/empty converges to all 1.0; empty prediction against a non-empty
// ground truth scores 0 across the board.
OverlapScores overlap_scores(const EnhancementMask& pred, const EnhancementMask& gt);

struct EvalReport {
    std::string id;
    double psnr_db = 0.0;
    double ssim = 0.0;
    double dice = 0.0, recall = 0.0, precision = 0.0;
};

}  // namespace vce
