#include "iprepa.hpp"

#include <algorithm>
#include <cmath>

#include "kernels.hpp"

namespace vce {

void AlignConfig::validate() const {
    if (tau_pos <= 0.0) throw ConfigError("align: tau_pos must be > 0");
    if (!(alpha_enh > alpha_bg && alpha_bg > alpha_mis && alpha_mis >= 0.0))
        throw ConfigError("align: weights must satisfy alpha_enh > alpha_bg > alpha_mis >= 0");
    if (lambda_int < 0.0 || lambda_phase < 0.0)
        throw ConfigError("align: lambdas must be >= 0");
    if (teacher_channels < 1) throw ConfigError("align: teacher_channels must be >= 1");
    if (eps <= 0.0) throw ConfigError("align: eps must be > 0");
}

std::vector<float> intensity_weights(const Volume& nc, const Volume& ce,
                                     const AlignConfig& cfg) {
    check_same_shape(nc, ce, "intensity_weights");
    std::vector<float> w(nc.size());
    const std::int64_t n = nc.size();
#pragma omp parallel for schedule(static) if(n > 4096)
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = double(ce.voxels[i]) - double(nc.voxels[i]);
        w[i] = static_cast<float>(d > cfg.tau_pos ? cfg.alpha_enh
                                                  : (d < 0.0 ? cfg.alpha_mis : cfg.alpha_bg));
    }
    return w;
}

namespace {

double window01(float hu) {
    const double v = (double(hu) - kTeacherWindowLo) / (kTeacherWindowHi - kTeacherWindowLo);
    return std::clamp(v, 0.0, 1.0);
}

}  // namespace

std::vector<double> teacher_descriptors(const Volume& vol, const PatchDims& patch) {
    const Dims3 g = token_grid_for(vol.shape, patch);
    const std::int64_t n_tok = dims_numel(g);
    const std::int64_t pv = patch.volume();

    std::vector<double> desc(n_tok * kTeacherDescriptor);
#pragma omp parallel for schedule(static) if(g[0] > 48)
    for (std::int64_t tz = 0; tz < g[0]; ++tz)
        for (std::int64_t ty = 0; ty < g[1]; ++ty)
            for (std::int64_t tx = 0; tx < g[2]; ++tx) {
                const std::int64_t tok = (tz * g[1] + ty) * g[2] + tx;
                std::vector<double> vals(pv);
                std::int64_t vi = 0;
                for (std::int64_t dz = 0; dz < patch.d; ++dz)
                    for (std::int64_t dy = 0; dy < patch.h; ++dy)
                        for (std::int64_t dx = 0; dx < patch.w; ++dx)
                            vals[vi++] = window01(vol.at(tz * patch.d + dz,
                                                         ty * patch.h + dy,
                                                         tx * patch.w + dx));
                double sum = 0.0, sum2 = 0.0, mn = vals[0], mx = vals[0];
                double hist[8] = {};
                for (double v : vals) {
                    sum += v;
                    sum2 += v * v;
                    mn = std::min(mn, v);
                    mx = std::max(mx, v);
                    int bin = static_cast<int>(v * 8.0);
                    ++hist[std::min(bin, 7)];
                }
                const double mean = sum / pv;
                const double var = std::max(0.0, sum2 / pv - mean * mean);
                auto at = [&](std::int64_t dz, std::int64_t dy, std::int64_t dx) {
                    return vals[(dz * patch.h + dy) * patch.w + dx];
                };
                double gsum[3] = {};
                std::int64_t gcnt[3] = {};
                for (std::int64_t dz = 0; dz < patch.d; ++dz)
                    for (std::int64_t dy = 0; dy < patch.h; ++dy)
                        for (std::int64_t dx = 0; dx < patch.w; ++dx) {
                            if (dz + 1 < patch.d) {
                                gsum[0] += std::abs(at(dz + 1, dy, dx) - at(dz, dy, dx));
                                ++gcnt[0];
                            }
                            if (dy + 1 < patch.h) {
                                gsum[1] += std::abs(at(dz, dy + 1, dx) - at(dz, dy, dx));
                                ++gcnt[1];
                            }
                            if (dx + 1 < patch.w) {
                                gsum[2] += std::abs(at(dz, dy, dx + 1) - at(dz, dy, dx));
                                ++gcnt[2];
                            }
                        }
                double* d = desc.data() + tok * kTeacherDescriptor;
                d[0] = mean;
                d[1] = std::sqrt(var);
                d[2] = mn;
                d[3] = mx;
                for (int b = 0; b < 8; ++b) d[4 + b] = hist[b] / static_cast<double>(pv);
                for (int a = 0; a < 3; ++a) d[12 + a] = gcnt[a] ? gsum[a] / gcnt[a] : 0.0;
                d[15] = at(patch.d / 2, patch.h / 2, patch.w / 2);
            }
    return desc;
}

template <class T>
std::vector<T> teacher_extract(const Volume& vol, const PatchDims& patch,
                               const AlignConfig& cfg) {
    const std::vector<double> desc = teacher_descriptors(vol, patch);
    const std::int64_t n_tok =
        static_cast<std::int64_t>(desc.size()) / kTeacherDescriptor;

    // Fixed seeded projection to C_t channels.
    const std::int64_t ct = cfg.teacher_channels;
    Rng rng(cfg.teacher_seed);
    std::vector<double> proj(ct * kTeacherDescriptor);
    rng.fill_normal(proj.data(), static_cast<std::int64_t>(proj.size()), 0.0,
                    1.0 / std::sqrt(double(kTeacherDescriptor)));
    std::vector<double> feat(n_tok * ct);
    kern::gemm_nt<double>(n_tok, ct, kTeacherDescriptor, 1.0, desc.data(), proj.data(),
                          feat.data());
    std::vector<T> out(feat.size());
    for (std::size_t i = 0; i < feat.size(); ++i) out[i] = static_cast<T>(feat[i]);
    return out;
}

template <class T>
TeacherFeatures<T> make_teacher_features(const Volume& nc, const Volume& ce,
                                         const PatchDims& patch, const AlignConfig& cfg) {
    check_same_shape(nc, ce, "make_teacher_features");
    const Dims3 g = token_grid_for(nc.shape, patch);
    const std::int64_t n_tok = dims_numel(g);
    TeacherFeatures<T> tf;
    tf.t_nc = make_tensor<T>({n_tok, cfg.teacher_channels}, teacher_extract<T>(nc, patch, cfg));
    tf.t_ce = make_tensor<T>({n_tok, cfg.teacher_channels}, teacher_extract<T>(ce, patch, cfg));
    const auto wv = downsample_weights(intensity_weights(nc, ce, cfg), nc.shape, patch);
    std::vector<T> w(wv.size());
    for (std::size_t i = 0; i < wv.size(); ++i) w[i] = static_cast<T>(wv[i]);
    tf.w = make_tensor<T>({n_tok, 1}, std::move(w));
    return tf;
}

template <class T>
TensorPtr<T> channel_normalize(const TensorPtr<T>& m, double eps) {
    return l2_normalize_lastdim(m, eps);
}

namespace {
template <class T>
void check_repa_shapes(const TensorPtr<T>& h, const TeacherFeatures<T>& tf, const char* op) {
    if (h->shape != tf.t_nc->shape || h->shape != tf.t_ce->shape)
        throw ShapeError(std::string(op) + ": student " + shape_str(h->shape) +
                         " vs teacher " + shape_str(tf.t_nc->shape));
    if (tf.w->shape.size() != 2 || tf.w->shape[0] != h->shape[0] || tf.w->shape[1] != 1)
        throw ShapeError(std::string(op) + ": weights must be N x 1, got " +
                         shape_str(tf.w->shape));
}
}  // namespace

template <class T>
TensorPtr<T> loss_int(const TensorPtr<T>& h, const TeacherFeatures<T>& tf, double eps) {
    check_repa_shapes(h, tf, "loss_int");
    auto residual = channel_normalize(sub(tf.t_ce, tf.t_nc), eps);
    auto diff = sub(channel_normalize(h, eps), residual);
    return mean_all(abs_op(mul(diff, tf.w)));
}

template <class T>
TensorPtr<T> loss_phase(const TensorPtr<T>& h, const TeacherFeatures<T>& tf, double eps) {
    check_repa_shapes(h, tf, "loss_phase");
    auto hn = channel_normalize(h, eps);
    auto gram_student = matmul(hn, transpose_last2(hn));
    auto gram_teacher = matmul(channel_normalize(tf.t_nc, eps),
                               transpose_last2(channel_normalize(tf.t_ce, eps)));
    auto wmat = matmul(tf.w, transpose_last2(tf.w));
    return mean_all(abs_op(mul(wmat, sub(gram_student, gram_teacher))));
}

#define VCE_INSTANTIATE_IPREPA(T)                                                          \
    template std::vector<T> teacher_extract<T>(const Volume&, const PatchDims&,            \
                                               const AlignConfig&);                        \
    template TeacherFeatures<T> make_teacher_features<T>(const Volume&, const Volume&,     \
                                                         const PatchDims&,                 \
                                                         const AlignConfig&);              \
    template TensorPtr<T> channel_normalize<T>(const TensorPtr<T>&, double);               \
    template TensorPtr<T> loss_int<T>(const TensorPtr<T>&, const TeacherFeatures<T>&,      \
                                      double);                                             \
    template TensorPtr<T> loss_phase<T>(const TensorPtr<T>&, const TeacherFeatures<T>&,    \
                                        double);

VCE_INSTANTIATE_IPREPA(float)
VCE_INSTANTIATE_IPREPA(double)

}  // namespace vce
