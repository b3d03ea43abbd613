#include "phantom.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace vce {

void PhantomConfig::validate() const {
    if (shape[0] < 2 || shape[1] < 2 || shape[2] < 2)
        throw ConfigError("phantom: shape too small " + dims_str(shape));
    std::set<int> ids;
    for (const auto& o : organs) {
        if (!ids.insert(o.label_id).second)
            throw ConfigError("phantom: duplicate organ label " + std::to_string(o.label_id));
        for (double r : o.radii)
            if (!(r > 0.0 && r <= 0.5))
                throw ConfigError("phantom: organ radius " + std::to_string(r) +
                                  " outside (0, 0.5]");
        for (const auto& [ph, e] : o.enhancement_hu) {
            if (ph == Phase::NC)
                throw ConfigError("phantom: enhancement for NC phase is meaningless");
            if (e < 0.0)
                throw ConfigError("phantom: negative enhancement " + std::to_string(e));
        }
    }
    for (int k = 1; k <= static_cast<int>(organs.size()); ++k)
        if (!ids.count(k))
            throw ConfigError("phantom: organ labels must be contiguous from 1, missing " +
                              std::to_string(k));
    if (noise_sigma < 0.0) throw ConfigError("phantom: negative noise_sigma");
    if (bone.count < 0 || air.count < 0) throw ConfigError("phantom: negative inclusion count");
}

namespace {

struct Ellipsoid {
    double cz, cy, cx;  // voxel units
    double rz, ry, rx;
    bool contains(double z, double y, double x) const {
        const double dz = (z - cz) / rz, dy = (y - cy) / ry, dx = (x - cx) / rx;
        return dz * dz + dy * dy + dx * dx <= 1.0;
    }
};

Ellipsoid organ_ellipsoid(const OrganSpec& o, const Dims3& shape) {
    return Ellipsoid{o.center[0] * shape[0], o.center[1] * shape[1], o.center[2] * shape[2],
                     o.radii[0] * shape[0],  o.radii[1] * shape[1],  o.radii[2] * shape[2]};
}

}  // namespace

PhantomSample generate_phantom(const PhantomConfig& config) {
    config.validate();
    const Dims3 shape = config.shape;
    const std::int64_t n = dims_numel(shape);

    PhantomSample out;
    out.labels.shape = shape;
    out.labels.spacing_mm = config.spacing_mm;
    out.labels.labels.assign(n, 0);

    std::vector<float> base(n, static_cast<float>(config.background_hu));

    // Organs: the label grid doubles as the overlap detector.
    for (const auto& spec : config.organs) {
        const Ellipsoid e = organ_ellipsoid(spec, shape);
        for (std::int64_t z = 0; z < shape[0]; ++z)
            for (std::int64_t y = 0; y < shape[1]; ++y)
                for (std::int64_t x = 0; x < shape[2]; ++x) {
                    if (!e.contains(z + 0.5, y + 0.5, x + 0.5)) continue;
                    auto& lbl = out.labels.labels[(z * shape[1] + y) * shape[2] + x];
                    if (lbl != 0)
                        throw ConfigError("phantom: organs " + std::to_string(lbl) + " and " +
                                          std::to_string(spec.label_id) + " overlap at (" +
                                          std::to_string(z) + ", " + std::to_string(y) +
                                          ", " + std::to_string(x) + ")");
                    lbl = static_cast<std::uint8_t>(spec.label_id);
                    base[(z * shape[1] + y) * shape[2] + x] =
                        static_cast<float>(spec.base_hu);
                }
    }

    Rng rng(config.seed);

    // Bone/air inclusions: spheres rejection-sampled away from organs and
    // from each other.
    auto place_inclusions = [&](const InclusionSpec& inc) {
        for (int i = 0; i < inc.count; ++i) {
            bool placed = false;
            for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
                const double cz = rng.uniform_in(0.1, 0.9) * shape[0];
                const double cy = rng.uniform_in(0.1, 0.9) * shape[1];
                const double cx = rng.uniform_in(0.1, 0.9) * shape[2];
                const double r = rng.uniform_in(0.03, 0.07) *
                                 static_cast<double>(std::min({shape[0], shape[1], shape[2]}));
                const std::int64_t z0 = std::max<std::int64_t>(0, std::int64_t(cz - r - 1));
                const std::int64_t z1 = std::min(shape[0], std::int64_t(cz + r + 2));
                const std::int64_t y0 = std::max<std::int64_t>(0, std::int64_t(cy - r - 1));
                const std::int64_t y1 = std::min(shape[1], std::int64_t(cy + r + 2));
                const std::int64_t x0 = std::max<std::int64_t>(0, std::int64_t(cx - r - 1));
                const std::int64_t x1 = std::min(shape[2], std::int64_t(cx + r + 2));
                bool clear = true;
                for (std::int64_t z = z0; z < z1 && clear; ++z)
                    for (std::int64_t y = y0; y < y1 && clear; ++y)
                        for (std::int64_t x = x0; x < x1 && clear; ++x) {
                            const double dz = z + 0.5 - cz, dy = y + 0.5 - cy,
                                         dx = x + 0.5 - cx;
                            if (dz * dz + dy * dy + dx * dx > r * r) continue;
                            const std::int64_t idx = (z * shape[1] + y) * shape[2] + x;
                            if (out.labels.labels[idx] != 0 ||
                                base[idx] != static_cast<float>(config.background_hu))
                                clear = false;
                        }
                if (!clear) continue;
                for (std::int64_t z = z0; z < z1; ++z)
                    for (std::int64_t y = y0; y < y1; ++y)
                        for (std::int64_t x = x0; x < x1; ++x) {
                            const double dz = z + 0.5 - cz, dy = y + 0.5 - cy,
                                         dx = x + 0.5 - cx;
                            if (dz * dz + dy * dy + dx * dx > r * r) continue;
                            base[(z * shape[1] + y) * shape[2] + x] =
                                static_cast<float>(inc.hu);
                        }
                placed = true;
            }
            if (!placed)
                throw ConfigError("phantom: could not place inclusion away from organs");
        }
    };
    place_inclusions(config.bone);
    place_inclusions(config.air);

    // Noise draw order: NC first, then A, then V, one generator stream.
    auto make_volume = [&](Phase ph, const std::vector<float>& grid) {
        Volume v;
        v.shape = shape;
        v.spacing_mm = config.spacing_mm;
        v.phase = ph;
        v.voxels.resize(n);
        if (config.noise_sigma > 0.0) {
            std::vector<float> noise(n);
            rng.fill_normal(noise.data(), n, 0.0, config.noise_sigma);
            for (std::int64_t i = 0; i < n; ++i) v.voxels[i] = clip_hu(grid[i] + noise[i]);
        } else {
            for (std::int64_t i = 0; i < n; ++i) v.voxels[i] = clip_hu(grid[i]);
        }
        return v;
    };

    out.nc = make_volume(Phase::NC, base);
    for (Phase ph : {Phase::A, Phase::V}) {
        std::vector<float> grid = base;
        for (const auto& spec : config.organs) {
            auto it = spec.enhancement_hu.find(ph);
            if (it == spec.enhancement_hu.end()) continue;
            const float enh = static_cast<float>(it->second);
            const std::uint8_t id = static_cast<std::uint8_t>(spec.label_id);
            for (std::int64_t i = 0; i < n; ++i)
                if (out.labels.labels[i] == id) grid[i] += enh;
        }
        out.phases[ph] = make_volume(ph, grid);
    }
    return out;
}

namespace {

struct WarpMode {
    double amp, fz, fy, fx, phi;
};

float trilinear(const Volume& v, double z, double y, double x) {
    const auto& s = v.shape;
    z = std::clamp(z, 0.0, static_cast<double>(s[0] - 1));
    y = std::clamp(y, 0.0, static_cast<double>(s[1] - 1));
    x = std::clamp(x, 0.0, static_cast<double>(s[2] - 1));
    const auto z0 = static_cast<std::int64_t>(z);
    const auto y0 = static_cast<std::int64_t>(y);
    const auto x0 = static_cast<std::int64_t>(x);
    const std::int64_t z1 = std::min(z0 + 1, s[0] - 1), y1 = std::min(y0 + 1, s[1] - 1),
                       x1 = std::min(x0 + 1, s[2] - 1);
    const double fz = z - z0, fy = y - y0, fx = x - x0;
    auto lerp = [](double a, double b, double f) { return a + (b - a) * f; };
    const double c00 = lerp(v.at(z0, y0, x0), v.at(z0, y0, x1), fx);
    const double c01 = lerp(v.at(z0, y1, x0), v.at(z0, y1, x1), fx);
    const double c10 = lerp(v.at(z1, y0, x0), v.at(z1, y0, x1), fx);
    const double c11 = lerp(v.at(z1, y1, x0), v.at(z1, y1, x1), fx);
    return static_cast<float>(lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz));
}

}  // namespace

Volume inject_misalignment(const Volume& vol, double magnitude_vox, std::uint64_t seed) {
    if (magnitude_vox < 0.0) throw ConfigError("inject_misalignment: negative magnitude");
    if (magnitude_vox == 0.0) return vol;

    const Dims3 s = vol.shape;
    const std::int64_t n = dims_numel(s);
    Rng rng(seed);

    std::array<std::array<WarpMode, 3>, 3> modes;
    for (auto& axis : modes)
        for (auto& m : axis) {
            m.amp = rng.uniform_in(0.3, 1.0);
            m.fz = static_cast<double>(rng.uniform_int(3));  // 0..2 cycles across the volume
            m.fy = static_cast<double>(rng.uniform_int(3));
            m.fx = static_cast<double>(rng.uniform_int(3));
            m.phi = rng.uniform_in(0.0, 6.283185307179586);
        }

    std::vector<std::array<float, 3>> disp(n);
    const double tau = 6.283185307179586;
#pragma omp parallel for schedule(static) if(s[0] > 48)
    for (std::int64_t z = 0; z < s[0]; ++z)
        for (std::int64_t y = 0; y < s[1]; ++y)
            for (std::int64_t x = 0; x < s[2]; ++x) {
                const double pz = static_cast<double>(z) / s[0];
                const double py = static_cast<double>(y) / s[1];
                const double px = static_cast<double>(x) / s[2];
                std::array<float, 3> u{};
                for (int a = 0; a < 3; ++a) {
                    double acc = 0.0;
                    for (const auto& m : modes[a])
                        acc += m.amp *
                               std::sin(tau * (m.fz * pz + m.fy * py + m.fx * px) + m.phi);
                    u[a] = static_cast<float>(acc);
                }
                disp[(z * s[1] + y) * s[2] + x] = u;
            }

    double peak = 0.0;
#pragma omp parallel for schedule(static) reduction(max : peak)
    for (std::int64_t i = 0; i < n; ++i) {
        const auto& u = disp[i];
        const double mag =
            std::sqrt(double(u[0]) * u[0] + double(u[1]) * u[1] + double(u[2]) * u[2]);
        if (mag > peak) peak = mag;
    }
    if (peak < 1e-12) return vol;
    const double gain = magnitude_vox / peak;

    Volume out = vol;
#pragma omp parallel for schedule(static) if(s[0] > 48)
    for (std::int64_t z = 0; z < s[0]; ++z)
        for (std::int64_t y = 0; y < s[1]; ++y)
            for (std::int64_t x = 0; x < s[2]; ++x) {
                const auto& u = disp[(z * s[1] + y) * s[2] + x];
                out.at(z, y, x) =
                    trilinear(vol, z + double(u[0]) * gain, y + double(u[1]) * gain,
                              x + double(u[2]) * gain);
            }
    return out;
}

PhantomPreset easy_preset() {
    PhantomPreset p;
    p.config.shape = {64, 64, 64};
    p.config.spacing_mm = {2.5, 1.0, 1.0};
    p.config.background_hu = 0.0;
    p.config.noise_sigma = 5.0;
    p.config.bone = {2, 700.0};
    p.config.air = {1, -800.0};
    p.config.organs = {
        {1, {0.38, 0.40, 0.38}, {0.16, 0.19, 0.20}, 60.0,
         {{Phase::A, 45.0}, {Phase::V, 70.0}}},
        {2, {0.62, 0.30, 0.70}, {0.11, 0.12, 0.11}, 100.0,
         {{Phase::A, 80.0}, {Phase::V, 40.0}}},
        {3, {0.60, 0.70, 0.32}, {0.10, 0.13, 0.11}, 30.0,
         {{Phase::A, 30.0}, {Phase::V, 55.0}}},
    };
    p.misalign_vox = 0.0;
    return p;
}

PhantomPreset hard_preset() {
    PhantomPreset p = easy_preset();
    p.config.noise_sigma = 10.0;
    p.misalign_vox = 1.5;
    return p;
}

PhantomPreset preset_by_name(const std::string& name) {
    if (name == "easy") return easy_preset();
    if (name == "hard") return hard_preset();
    throw ConfigError("unknown phantom preset '" + name + "' (want easy or hard)");
}

}  // namespace vce
