#include <doctest.h>

#include <cmath>
#include <cstring>

#include "dit.hpp"

using namespace vce;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.depth = 2;
    cfg.width = 16;
    cfg.heads = 2;
    cfg.patch = {1, 2, 2};  // raw channels 4
    cfg.token_grid = {2, 2, 2};
    cfg.moe_block_indices = {1};
    cfg.repa_block_index = 1;
    cfg.memory_slots = 2;
    cfg.organ_count = 2;
    cfg.ffn_mult = 2;
    cfg.repa_channels = 4;
    return cfg;
}

template <class T>
TokenSeqT<T> random_tokens(const ModelConfig& cfg, std::uint64_t seed) {
    TokenSeqT<T> t;
    t.grid = cfg.token_grid;
    t.n = cfg.n_tokens();
    t.c = cfg.raw_channels();
    t.values.resize(t.n * t.c);
    Rng rng(seed);
    rng.fill_normal(t.values.data(), static_cast<std::int64_t>(t.values.size()));
    return t;
}

template <class T>
void randomize_params(DitModel<T>& m, std::uint64_t seed, double stddev = 0.2) {
    Rng rng(seed);
    for (auto& [name, p] : m.params.items)
        rng.fill_normal(p->data.data(), p->numel(), 0.0, stddev);
}

}  // namespace

TEST_CASE("timestep embedding is deterministic, finite and separates endpoints") {
    const std::int64_t c = 64;
    const auto e0 = timestep_embed<double>(0.0, c);
    const auto e1 = timestep_embed<double>(1.0, c);
    const auto e0_again = timestep_embed<double>(0.0, c);
    CHECK(std::memcmp(e0.data(), e0_again.data(), c * 8) == 0);

    int differing = 0;
    for (std::int64_t i = 0; i < c; ++i)
        if (std::abs(e0[i] - e1[i]) > 1e-3) ++differing;
    CHECK(differing >= c / 2);

    for (double t : {0.0, 0.5, 1.0})
        for (double v : timestep_embed<double>(t, c)) CHECK(std::isfinite(v));
    CHECK_THROWS_AS(timestep_embed<double>(1.5, c), ConfigError);
}

TEST_CASE("timestep embeddings are distinct on a 1e-3 grid") {
    const std::int64_t c = 64;
    std::vector<std::vector<double>> seen;
    for (int i = 0; i <= 1000; i += 37) {
        const auto e = timestep_embed<double>(i / 1000.0, c);
        for (const auto& prev : seen) {
            double max_diff = 0;
            for (std::int64_t j = 0; j < c; ++j)
                max_diff = std::max(max_diff, std::abs(prev[j] - e[j]));
            CHECK(max_diff > 1e-6);
        }
        seen.push_back(e);
    }
}

TEST_CASE("dit forward produces velocity shaped like its input") {
    const ModelConfig cfg = small_config();
    auto model = DitModel<float>::init(cfg, 1);
    const auto z_t = random_tokens<float>(cfg, 2);
    const auto z_nc = random_tokens<float>(cfg, 3);
    TokenLabels labels(cfg.n_tokens(), 0);
    labels[1] = 1;
    labels[5] = 2;
    const auto fwd = model.forward(z_t, z_nc, 0.3, Phase::A, labels);
    CHECK(fwd.velocity->shape == Shape{cfg.n_tokens(), cfg.raw_channels()});
    CHECK(fwd.tapped->shape == Shape{cfg.n_tokens(), cfg.width});
    CHECK(model.repa_project(fwd.tapped)->shape == Shape{cfg.n_tokens(), cfg.repa_channels});
}

TEST_CASE("forward is deterministic for fixed parameters and inputs") {
    const ModelConfig cfg = small_config();
    auto model = DitModel<float>::init(cfg, 4);
    randomize_params(model, 5);
    const auto z_t = random_tokens<float>(cfg, 6);
    const auto z_nc = random_tokens<float>(cfg, 7);
    TokenLabels labels(cfg.n_tokens(), 1);
    const auto a = model.forward(z_t, z_nc, 0.7, Phase::V, labels);
    const auto b = model.forward(z_t, z_nc, 0.7, Phase::V, labels);
    CHECK(std::memcmp(a.velocity->data.data(), b.velocity->data.data(),
                      a.velocity->numel() * 4) == 0);
}

TEST_CASE("zero-initialized gates make the output independent of labels") {
    const ModelConfig cfg = small_config();
    auto model = DitModel<float>::init(cfg, 8);  // expert gates zero at init
    const auto z_t = random_tokens<float>(cfg, 9);
    const auto z_nc = random_tokens<float>(cfg, 10);
    TokenLabels a_labels(cfg.n_tokens(), 0);
    TokenLabels b_labels = {2, 1, 0, 2, 1, 0, 2, 1};
    const auto a = model.forward(z_t, z_nc, 0.4, Phase::A, a_labels);
    const auto b = model.forward(z_t, z_nc, 0.4, Phase::A, b_labels);
    CHECK(std::memcmp(a.velocity->data.data(), b.velocity->data.data(),
                      a.velocity->numel() * 4) == 0);
}

TEST_CASE("consistently permuting organ ids at init leaves the output unchanged") {
    const ModelConfig cfg = small_config();
    auto model = DitModel<float>::init(cfg, 11);
    const auto z_t = random_tokens<float>(cfg, 12);
    const auto z_nc = random_tokens<float>(cfg, 13);
    TokenLabels labels = {1, 2, 0, 1, 2, 0, 1, 2};
    TokenLabels swapped = {2, 1, 0, 2, 1, 0, 2, 1};
    const auto a = model.forward(z_t, z_nc, 0.6, Phase::A, labels);
    const auto b = model.forward(z_t, z_nc, 0.6, Phase::A, swapped);
    CHECK(std::memcmp(a.velocity->data.data(), b.velocity->data.data(),
                      a.velocity->numel() * 4) == 0);
}

TEST_CASE("forward validates grids, labels and capture blocks") {
    const ModelConfig cfg = small_config();
    auto model = DitModel<float>::init(cfg, 14);
    const auto z_t = random_tokens<float>(cfg, 15);
    const auto z_nc = random_tokens<float>(cfg, 16);
    TokenLabels labels(cfg.n_tokens(), 0);

    TokenSeqT<float> bad = z_t;
    bad.grid = {4, 2, 1};
    CHECK_THROWS_AS(model.forward(bad, z_nc, 0.5, Phase::A, labels), ShapeError);
    CHECK_THROWS_AS(model.forward(z_t, z_nc, 0.5, Phase::A, TokenLabels(3, 0)), ShapeError);
    CHECK_THROWS_AS(model.forward(z_t, z_nc, 0.5, Phase::A, labels, /*capture_block=*/0),
                    ConfigError);  // block 0 has no MoE layer
    CHECK_NOTHROW(model.forward(z_t, z_nc, 0.5, Phase::A, labels, /*capture_block=*/1));
}

TEST_CASE("model config validation") {
    ModelConfig cfg = small_config();
    cfg.heads = 3;  // does not divide width 16
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.moe_block_indices = {5};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.repa_block_index = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("two-block model gradient passes finite differences end to end") {
    // 64-bit verification mode, fm-style loss through the whole model.
    ModelConfig cfg = small_config();  // depth 2, width 16, N=8
    auto model = DitModel<double>::init(cfg, 17);
    randomize_params(model, 18);

    const auto z_t = random_tokens<double>(cfg, 19);
    const auto z_nc = random_tokens<double>(cfg, 20);
    const auto target = random_tokens<double>(cfg, 21);
    TokenLabels labels = {1, 0, 2, 1, 0, 2, 1, 0};

    auto loss = [&]() {
        auto fwd = model.forward(z_t, z_nc, 0.37, Phase::A, labels);
        return fm_loss(fwd.velocity, tokens_to_tensor(target));
    };
    std::vector<TensorPtr<double>> params;
    for (auto& [name, p] : model.params.items) params.push_back(p);
    CHECK(grad_check_params(loss, params, 1e-4) < 1e-4);
}
