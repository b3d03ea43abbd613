#include <doctest.h>

#include <cmath>
#include <cstring>

#include "flow.hpp"

using namespace vce;

namespace {

template <class T>
TokenSeqT<T> random_tokens(std::int64_t n, std::int64_t c, std::uint64_t seed) {
    TokenSeqT<T> t;
    t.n = n;
    t.c = c;
    t.grid = {n, 1, 1};
    t.values.resize(n * c);
    Rng rng(seed);
    rng.fill_normal(t.values.data(), n * c);
    return t;
}

// Values drawn from small integers so interpolation at dyadic t is exact.
template <class T>
TokenSeqT<T> integer_tokens(std::int64_t n, std::int64_t c, std::uint64_t seed) {
    TokenSeqT<T> t = random_tokens<T>(n, c, seed);
    Rng rng(seed + 1);
    for (auto& v : t.values) v = static_cast<T>(rng.uniform_int(41) - 20);
    return t;
}

}  // namespace

TEST_CASE("interpolation endpoints are exact") {
    const auto z_ce = random_tokens<double>(6, 4, 1);
    const auto z_eps = random_tokens<double>(6, 4, 2);
    const auto s0 = make_flow_sample(z_ce, z_eps, 0.0);
    const auto s1 = make_flow_sample(z_ce, z_eps, 1.0);
    CHECK(std::memcmp(s0.z_t.values.data(), z_eps.values.data(), 6 * 4 * 8) == 0);
    CHECK(std::memcmp(s1.z_t.values.data(), z_ce.values.data(), 6 * 4 * 8) == 0);
    // Same in the training dtype.
    const auto f_ce = random_tokens<float>(6, 4, 3);
    const auto f_eps = random_tokens<float>(6, 4, 4);
    CHECK(std::memcmp(make_flow_sample(f_ce, f_eps, 0.0).z_t.values.data(),
                      f_eps.values.data(), 6 * 4 * 4) == 0);
    CHECK(std::memcmp(make_flow_sample(f_ce, f_eps, 1.0).z_t.values.data(),
                      f_ce.values.data(), 6 * 4 * 4) == 0);
}

TEST_CASE("hand interpolation: z_ce=[2], z_eps=[0], t=0.5") {
    TokenSeqT<double> ce, eps;
    ce.n = eps.n = 1;
    ce.c = eps.c = 1;
    ce.grid = eps.grid = {1, 1, 1};
    ce.values = {2.0};
    eps.values = {0.0};
    const auto s = make_flow_sample(ce, eps, 0.5);
    CHECK(s.z_t.values[0] == 1.0);
    CHECK(s.v.values[0] == 2.0);
}

TEST_CASE("finite-difference of the path equals the velocity bitwise at dyadic t") {
    const auto z_ce = integer_tokens<double>(8, 5, 10);
    const auto z_eps = integer_tokens<double>(8, 5, 20);
    const double t1 = 0.25, t2 = 0.75;
    const auto s1 = make_flow_sample(z_ce, z_eps, t1);
    const auto s2 = make_flow_sample(z_ce, z_eps, t2);
    for (std::size_t i = 0; i < s1.z_t.values.size(); ++i) {
        const double fd = (s2.z_t.values[i] - s1.z_t.values[i]) / (t2 - t1);
        CHECK(std::memcmp(&fd, &s1.v.values[i], 8) == 0);  // bitwise
    }
}

TEST_CASE("make_flow_sample validates shapes and t") {
    const auto a = random_tokens<double>(4, 3, 1);
    const auto b = random_tokens<double>(5, 3, 2);
    CHECK_THROWS_AS(make_flow_sample(a, b, 0.5), ShapeError);
    CHECK_THROWS_AS(make_flow_sample(a, a, 1.5), ConfigError);
}

TEST_CASE("fm_loss zero and constant-offset cases") {
    const auto t = random_tokens<double>(5, 7, 3);
    auto pred = tokens_to_tensor(t);
    CHECK(fm_loss(pred, tokens_to_tensor(t))->item() == 0.0);

    auto shifted = t;
    for (auto& v : shifted.values) v += 1.0;
    CHECK(fm_loss(tokens_to_tensor(shifted), tokens_to_tensor(t))->item() ==
          doctest::Approx(1.0).epsilon(1e-12));

    CHECK_THROWS_AS(fm_loss(tokens_to_tensor(random_tokens<double>(5, 6, 4)),
                            tokens_to_tensor(t)),
                    ShapeError);
}

TEST_CASE("fm_loss gradient is 2(pred - target)/(N*C)") {
    const auto target = random_tokens<double>(4, 6, 5);
    const auto pred = random_tokens<double>(4, 6, 6);
    auto pred_t = tokens_to_tensor(pred, true);
    backward(fm_loss(pred_t, tokens_to_tensor(target)));
    const double scale = 2.0 / (4 * 6);
    for (std::int64_t i = 0; i < pred_t->numel(); ++i)
        CHECK(pred_t->grad[i] ==
              doctest::Approx(scale * (pred.values[i] - target.values[i])).epsilon(1e-6));

    auto f = [&](const TensorPtr<double>& x) { return fm_loss(x, tokens_to_tensor(target)); };
    CHECK(grad_check(f, tokens_to_tensor(random_tokens<double>(4, 6, 7)), 1e-5) < 1e-6);
}

TEST_CASE("euler sampling with the oracle velocity recovers the data endpoint") {
    const std::uint64_t seed = 77;
    const auto z_nc = random_tokens<float>(16, 8, 30);
    TokenSeqT<float> z_eps = z_nc;
    {
        Rng rng(seed);
        rng.fill_normal(z_eps.values.data(),
                        static_cast<std::int64_t>(z_eps.values.size()));
    }
    const auto z_ce = random_tokens<float>(16, 8, 31);
    TokenSeqT<float> truth = z_ce;
    for (std::size_t i = 0; i < truth.values.size(); ++i)
        truth.values[i] = z_ce.values[i] - z_eps.values[i];

    VelocityModel<float> oracle = [&](const TokenSeqT<float>&, const TokenSeqT<float>&,
                                      double) { return truth; };
    for (int steps : {1, 16}) {
        const auto out = euler_sample(oracle, z_nc, steps, seed);
        for (std::size_t i = 0; i < out.values.size(); ++i)
            CHECK(std::abs(out.values[i] - z_ce.values[i]) < 1e-5f);
    }
}

TEST_CASE("zero velocity model returns the initial gaussian draw") {
    const auto z_nc = random_tokens<float>(8, 4, 40);
    VelocityModel<float> zero = [&](const TokenSeqT<float>& z, const TokenSeqT<float>&,
                                    double) {
        TokenSeqT<float> v = z;
        std::fill(v.values.begin(), v.values.end(), 0.0f);
        return v;
    };
    const auto out = euler_sample(zero, z_nc, 5, 123);
    Rng rng(123);
    TokenSeqT<float> want = z_nc;
    rng.fill_normal(want.values.data(), static_cast<std::int64_t>(want.values.size()));
    CHECK(std::memcmp(out.values.data(), want.values.data(), out.values.size() * 4) == 0);
}

TEST_CASE("euler sampling is deterministic and rejects bad input") {
    const auto z_nc = random_tokens<float>(8, 4, 50);
    VelocityModel<float> noisy = [](const TokenSeqT<float>& z, const TokenSeqT<float>&,
                                    double t) {
        TokenSeqT<float> v = z;
        for (auto& x : v.values) x = static_cast<float>(std::sin(x + t));
        return v;
    };
    const auto a = euler_sample(noisy, z_nc, 7, 9);
    const auto b = euler_sample(noisy, z_nc, 7, 9);
    CHECK(std::memcmp(a.values.data(), b.values.data(), a.values.size() * 4) == 0);
    CHECK_THROWS_AS(euler_sample(noisy, z_nc, 0, 9), ConfigError);

    VelocityModel<float> exploding = [](const TokenSeqT<float>& z, const TokenSeqT<float>&,
                                        double) {
        TokenSeqT<float> v = z;
        v.values[0] = std::numeric_limits<float>::infinity();
        return v;
    };
    CHECK_THROWS_WITH_AS(euler_sample(exploding, z_nc, 4, 9),
                         doctest::Contains("step 0"), NumericError);
}
