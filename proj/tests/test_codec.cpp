#include <doctest.h>

#include <cstring>
#include <map>

#include "codec.hpp"

using namespace vce;

namespace {

std::vector<float> random_grid(const Dims3& shape, std::uint64_t seed) {
    std::vector<float> v(dims_numel(shape));
    Rng rng(seed);
    rng.fill_normal(v.data(), static_cast<std::int64_t>(v.size()));
    return v;
}

// Independent vote counter used as the oracle for label downsampling.
int vote_oracle(const std::vector<int>& patch_labels) {
    std::map<int, int> counts;
    for (int l : patch_labels) ++counts[l];
    int best = 0;
    for (const auto& [l, c] : counts) best = std::max(best, c);
    for (const auto& [l, c] : counts)
        if (l != 0 && c == best) return l;  // map iterates ascending: smallest non-zero
    return 0;
}

}  // namespace

TEST_CASE("normalize_hu maps the clipped range onto [-1, 1] exactly") {
    CHECK(normalize_hu_value(-1024.0f) == -1.0f);
    CHECK(normalize_hu_value(3071.0f) == 1.0f);
    CHECK(normalize_hu_value(1023.5f) == 0.0f);
    CHECK(normalize_hu_value(-5000.0f) == -1.0f);  // clips first
    CHECK(normalize_hu_value(9999.0f) == 1.0f);
    // Inverse within a milli-HU across the range.
    for (float hu = -1024.0f; hu <= 3071.0f; hu += 37.25f)
        CHECK(std::abs(denormalize_hu_value(normalize_hu_value(hu)) - hu) < 1e-3f);
}

TEST_CASE("patchify token counts follow the shape/patch quotient") {
    const auto one = patchify(random_grid({2, 8, 8}, 1), {2, 8, 8}, PatchDims{2, 8, 8});
    CHECK(one.n == 1);
    CHECK(one.c == 128);
    CHECK(one.grid == Dims3{1, 1, 1});

    const auto eight = patchify(random_grid({4, 16, 16}, 2), {4, 16, 16}, PatchDims{2, 8, 8});
    CHECK(eight.n == 8);
    CHECK(eight.grid == Dims3{2, 2, 2});
}

TEST_CASE("unpatchify(patchify(x)) is bitwise identity on random grids") {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const PatchDims patch{1 + rng.uniform_int(3), 1 + rng.uniform_int(4),
                              1 + rng.uniform_int(4)};
        const Dims3 shape{patch.d * (1 + rng.uniform_int(4)),
                          patch.h * (1 + rng.uniform_int(4)),
                          patch.w * (1 + rng.uniform_int(4))};
        const auto grid = random_grid(shape, 100 + trial);
        const auto tokens = patchify(grid, shape, patch);
        const auto back = unpatchify(tokens, patch, shape);
        REQUIRE(back.size() == grid.size());
        CHECK(std::memcmp(back.data(), grid.data(), grid.size() * 4) == 0);
    }
}

TEST_CASE("non-divisible shapes are rejected") {
    CHECK_THROWS_AS(patchify(random_grid({5, 8, 8}, 4), {5, 8, 8}, PatchDims{2, 8, 8}),
                    ShapeError);
    CHECK_THROWS_AS(downsample_weights(std::vector<float>(5 * 8 * 8, 1.0f), {5, 8, 8},
                                       PatchDims{2, 8, 8}),
                    ShapeError);
    CHECK_THROWS_AS(patchify(random_grid({4, 8, 8}, 4), {6, 8, 8}, PatchDims{2, 8, 8}),
                    ShapeError);
}

TEST_CASE("label downsampling follows majority vote with the stated tie-breaks") {
    LabelVolume lv;
    lv.shape = {2, 2, 2};

    lv.labels = {2, 2, 2, 2, 2, 2, 2, 2};  // unanimous
    CHECK(downsample_labels(lv, PatchDims{2, 2, 2}) == TokenLabels{2});

    lv.labels = {0, 0, 0, 1, 1, 0, 0, 1};  // 60/40 background majority
    CHECK(downsample_labels(lv, PatchDims{2, 2, 2}) == TokenLabels{0});

    lv.labels = {1, 1, 1, 1, 2, 2, 2, 2};  // 50/50 -> smaller non-zero id
    CHECK(downsample_labels(lv, PatchDims{2, 2, 2}) == TokenLabels{1});

    lv.labels = {0, 0, 0, 0, 2, 2, 2, 2};  // 50/50 with background -> non-zero wins
    CHECK(downsample_labels(lv, PatchDims{2, 2, 2}) == TokenLabels{2});
}

TEST_CASE("label downsampling matches a brute-force vote oracle") {
    Rng rng(9);
    const PatchDims patch{2, 2, 2};
    const Dims3 shape{8, 8, 8};
    for (int trial = 0; trial < 5; ++trial) {
        LabelVolume lv;
        lv.shape = shape;
        lv.labels.resize(dims_numel(shape));
        for (auto& l : lv.labels) l = static_cast<std::uint8_t>(rng.uniform_int(4));
        const auto got = downsample_labels(lv, patch);
        const Dims3 g = token_grid_for(shape, patch);
        for (std::int64_t tz = 0; tz < g[0]; ++tz)
            for (std::int64_t ty = 0; ty < g[1]; ++ty)
                for (std::int64_t tx = 0; tx < g[2]; ++tx) {
                    std::vector<int> patch_labels;
                    for (std::int64_t dz = 0; dz < patch.d; ++dz)
                        for (std::int64_t dy = 0; dy < patch.h; ++dy)
                            for (std::int64_t dx = 0; dx < patch.w; ++dx)
                                patch_labels.push_back(lv.at(tz * patch.d + dz,
                                                             ty * patch.h + dy,
                                                             tx * patch.w + dx));
                    CHECK(got[(tz * g[1] + ty) * g[2] + tx] == vote_oracle(patch_labels));
                }
    }
}

TEST_CASE("token labeled k implies at least one voxel of label k in its patch") {
    Rng rng(10);
    LabelVolume lv;
    lv.shape = {8, 8, 8};
    lv.labels.resize(512);
    for (auto& l : lv.labels) l = static_cast<std::uint8_t>(rng.uniform_int(3));
    const PatchDims patch{2, 4, 4};
    const auto toks = downsample_labels(lv, patch);
    const Dims3 g = token_grid_for(lv.shape, patch);
    for (std::int64_t tz = 0; tz < g[0]; ++tz)
        for (std::int64_t ty = 0; ty < g[1]; ++ty)
            for (std::int64_t tx = 0; tx < g[2]; ++tx) {
                const int k = toks[(tz * g[1] + ty) * g[2] + tx];
                if (k == 0) continue;
                bool found = false;
                for (std::int64_t dz = 0; dz < patch.d && !found; ++dz)
                    for (std::int64_t dy = 0; dy < patch.h && !found; ++dy)
                        for (std::int64_t dx = 0; dx < patch.w && !found; ++dx)
                            found = lv.at(tz * patch.d + dz, ty * patch.h + dy,
                                          tx * patch.w + dx) == k;
                CHECK(found);
            }
}

TEST_CASE("weight downsampling is the patch mean and stays inside voxel bounds") {
    const Dims3 shape{2, 2, 2};
    SUBCASE("uniform field") {
        std::vector<float> w(8, 0.37f);
        const auto toks = downsample_weights(w, shape, PatchDims{2, 2, 2});
        REQUIRE(toks.size() == 1);
        CHECK(toks[0] == doctest::Approx(0.37f));
    }
    SUBCASE("half 2.0 half 0.1") {
        std::vector<float> w = {2.0f, 2.0f, 2.0f, 2.0f, 0.1f, 0.1f, 0.1f, 0.1f};
        const auto toks = downsample_weights(w, shape, PatchDims{2, 2, 2});
        CHECK(toks[0] == doctest::Approx(1.05f).epsilon(1e-6));
    }
    SUBCASE("random fields stay within min/max and match a mean oracle") {
        Rng rng(11);
        const Dims3 big{8, 8, 8};
        std::vector<float> w(512);
        for (auto& x : w) x = static_cast<float>(rng.uniform_in(0.0, 3.0));
        const PatchDims patch{2, 4, 2};
        const auto toks = downsample_weights(w, big, patch);
        const Dims3 g = token_grid_for(big, patch);
        for (std::int64_t tz = 0; tz < g[0]; ++tz)
            for (std::int64_t ty = 0; ty < g[1]; ++ty)
                for (std::int64_t tx = 0; tx < g[2]; ++tx) {
                    double acc = 0;
                    float lo = 1e9f, hi = -1e9f;
                    for (std::int64_t dz = 0; dz < patch.d; ++dz)
                        for (std::int64_t dy = 0; dy < patch.h; ++dy)
                            for (std::int64_t dx = 0; dx < patch.w; ++dx) {
                                const float v = w[((tz * patch.d + dz) * 8 +
                                                   ty * patch.h + dy) * 8 +
                                                  tx * patch.w + dx];
                                acc += v;
                                lo = std::min(lo, v);
                                hi = std::max(hi, v);
                            }
                    const float got = toks[(tz * g[1] + ty) * g[2] + tx];
                    CHECK(got == doctest::Approx(acc / patch.volume()).epsilon(1e-6));
                    CHECK(got >= lo - 1e-6f);
                    CHECK(got <= hi + 1e-6f);
                }
    }
}
