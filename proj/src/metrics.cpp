#include "metrics.hpp"

#include <algorithm>
#include <cmath>

namespace vce {

double psnr(const Volume& a, const Volume& b) {
    check_same_shape(a, b, "psnr");
    const std::int64_t n = a.size();
    double se = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = double(clip_hu(a.voxels[i])) - double(clip_hu(b.voxels[i]));
        se += d * d;
    }
    if (se == 0.0) return kPsnrCapDb;
    const double rmse = std::sqrt(se / static_cast<double>(n));
    return std::min(kPsnrCapDb, 20.0 * std::log10(kHuRange / rmse));
}

namespace {

// Separable Gaussian blur along one axis, replicated for z/y/x by stride.
void blur_axis(const std::vector<double>& src, std::vector<double>& dst, const Dims3& s,
               int axis, const std::vector<double>& kernel) {
    const int r = static_cast<int>(kernel.size()) / 2;
    const std::int64_t dim[3] = {s[0], s[1], s[2]};
    const std::int64_t stride[3] = {s[1] * s[2], s[2], 1};
    const std::int64_t ax_dim = dim[axis], ax_stride = stride[axis];
#pragma omp parallel for schedule(static) if(s[0] > 48)
    for (std::int64_t z = 0; z < s[0]; ++z)
        for (std::int64_t y = 0; y < s[1]; ++y)
            for (std::int64_t x = 0; x < s[2]; ++x) {
                const std::int64_t pos[3] = {z, y, x};
                const std::int64_t base = z * stride[0] + y * stride[1] + x;
                double acc = 0.0;
                for (int k = -r; k <= r; ++k) {
                    std::int64_t p = pos[axis] + k;
                    p = std::clamp<std::int64_t>(p, 0, ax_dim - 1);
                    acc += kernel[k + r] * src[base + (p - pos[axis]) * ax_stride];
                }
                dst[base] = acc;
            }
}

std::vector<double> gaussian_blur(const std::vector<double>& src, const Dims3& s,
                                  const std::vector<double>& kernel) {
    std::vector<double> a = src, b(src.size());
    blur_axis(a, b, s, 0, kernel);
    blur_axis(b, a, s, 1, kernel);
    blur_axis(a, b, s, 2, kernel);
    return b;
}

}  // namespace

double ssim3d(const Volume& va, const Volume& vb) {
    check_same_shape(va, vb, "ssim3d");
    const Dims3 s = va.shape;
    if (s[0] < kSsimWindow || s[1] < kSsimWindow || s[2] < kSsimWindow)
        throw ShapeError("ssim3d: volume " + dims_str(s) + " smaller than the " +
                         std::to_string(kSsimWindow) + "^3 window");

    std::vector<double> kernel(kSsimWindow);
    {
        const int r = kSsimWindow / 2;
        double sum = 0.0;
        for (int i = 0; i < kSsimWindow; ++i) {
            const double d = i - r;
            kernel[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
            sum += kernel[i];
        }
        for (auto& k : kernel) k /= sum;
    }

    const std::int64_t n = va.size();
    std::vector<double> a(n), b(n), aa(n), bb(n), ab(n);
    for (std::int64_t i = 0; i < n; ++i) {
        a[i] = clip_hu(va.voxels[i]);
        b[i] = clip_hu(vb.voxels[i]);
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const auto mu_a = gaussian_blur(a, s, kernel);
    const auto mu_b = gaussian_blur(b, s, kernel);
    const auto m_aa = gaussian_blur(aa, s, kernel);
    const auto m_bb = gaussian_blur(bb, s, kernel);
    const auto m_ab = gaussian_blur(ab, s, kernel);

    const double c1 = (kSsimK1 * kHuRange) * (kSsimK1 * kHuRange);
    const double c2 = (kSsimK2 * kHuRange) * (kSsimK2 * kHuRange);
    const int r = kSsimWindow / 2;

    double acc = 0.0;
    std::int64_t count = 0;
    for (std::int64_t z = r; z < s[0] - r; ++z)
        for (std::int64_t y = r; y < s[1] - r; ++y)
            for (std::int64_t x = r; x < s[2] - r; ++x) {
                const std::int64_t i = (z * s[1] + y) * s[2] + x;
                const double ma = mu_a[i], mb = mu_b[i];
                const double va_ = std::max(0.0, m_aa[i] - ma * ma);
                const double vb_ = std::max(0.0, m_bb[i] - mb * mb);
                const double cov = m_ab[i] - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
                       ((ma * ma + mb * mb + c1) * (va_ + vb_ + c2));
                ++count;
            }
    return acc / static_cast<double>(count);
}

EnhancementMask enhancement_mask(const Volume& nc, const Volume& ce, double threshold_hu) {
    check_same_shape(nc, ce, "enhancement_mask");
    EnhancementMask m;
    m.shape = nc.shape;
    m.threshold_hu = threshold_hu;
    m.mask.resize(nc.size());
    const std::int64_t n = nc.size();
#pragma omp parallel for schedule(static) if(n > 4096)
    for (std::int64_t i = 0; i < n; ++i)
        m.mask[i] = (double(ce.voxels[i]) - double(nc.voxels[i]) > threshold_hu) ? 1 : 0;
    return m;
}

OverlapScores overlap_scores(const EnhancementMask& pred, const EnhancementMask& gt) {
    if (pred.shape != gt.shape)
        throw ShapeError("overlap_scores: mask shapes differ, " + dims_str(pred.shape) +
                         " vs " + dims_str(gt.shape));
    std::int64_t p = 0, g = 0, both = 0;
    const std::int64_t n = static_cast<std::int64_t>(pred.mask.size());
    for (std::int64_t i = 0; i < n; ++i) {
        p += pred.mask[i] != 0;
        g += gt.mask[i] != 0;
        both += (pred.mask[i] != 0) && (gt.mask[i] != 0);
    }
    OverlapScores s;
    if (p == 0 && g == 0) {
        s.dice = s.recall = s.precision = 1.0;
        return s;
    }
    s.dice = (p + g) > 0 ? 2.0 * both / static_cast<double>(p + g) : 1.0;
    s.recall = g > 0 ? static_cast<double>(both) / g : 1.0;
    s.precision = p > 0 ? static_cast<double>(both) / p : 0.0;
    return s;
}

}  // namespace vce
