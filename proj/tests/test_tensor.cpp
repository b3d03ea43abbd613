#include <doctest.h>

#include <cmath>
#include <cstring>

#include "tensor.hpp"

using namespace vce;

namespace {

TensorPtr<double> rnd(const Shape& s, std::uint64_t seed, double stddev = 1.0) {
    Rng rng(seed);
    return randn<double>(s, rng, stddev);
}

// Random values bounded away from zero; keeps probe partials from vanishing,
// which would put finite differences below their own noise floor.
TensorPtr<double> rnd_away(const Shape& s, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(numel(s));
    for (auto& x : v) {
        const double n = rng.normal();
        x = (n < 0 ? -1.0 : 1.0) * (0.5 + std::abs(n));
    }
    return make_tensor<double>(s, std::move(v));
}

}  // namespace

TEST_CASE("matmul of all-ones 2x3 and 3x1 gives row sums") {
    auto a = full<double>({2, 3}, 1.0);
    auto b = full<double>({3, 1}, 1.0);
    auto c = matmul(a, b);
    REQUIRE(c->shape == Shape{2, 1});
    CHECK(c->data[0] == 3.0);
    CHECK(c->data[1] == 3.0);
}

TEST_CASE("softmax of [0, 0] is [0.5, 0.5]") {
    auto y = softmax_lastdim(make_tensor<double>({2}, {0.0, 0.0}));
    CHECK(y->data[0] == doctest::Approx(0.5));
    CHECK(y->data[1] == doctest::Approx(0.5));
}

TEST_CASE("l2norm of [3, 4] is [0.6, 0.8]") {
    auto y = l2_normalize_lastdim(make_tensor<double>({2}, {3.0, 4.0}), 1e-8);
    CHECK(y->data[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(y->data[1] == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("backward of sum gives all-ones and accumulates on repeat") {
    auto x = rnd({2, 2}, 1);
    x->requires_grad = true;
    auto loss = sum_all(x);
    backward(loss);
    for (double g : x->grad) CHECK(g == 1.0);
    backward(loss);  // repeated call accumulates
    for (double g : x->grad) CHECK(g == 2.0);
}

TEST_CASE("backward of sum(x*x) at [1, 2] gives [2, 4]") {
    auto x = make_tensor<double>({2}, {1.0, 2.0}, true);
    backward(sum_all(mul(x, x)));
    CHECK(x->grad[0] == doctest::Approx(2.0));
    CHECK(x->grad[1] == doctest::Approx(4.0));
}

TEST_CASE("mean of a softmax is constant: gradient vanishes") {
    auto x = rnd({3, 5}, 2);
    x->requires_grad = true;
    backward(mean_all(softmax_lastdim(x)));
    for (double g : x->grad) CHECK(std::abs(g) < 1e-6);
    // Central differences agree that the function is flat.
    auto f = [](const TensorPtr<double>& t) { return mean_all(softmax_lastdim(t)); };
    auto y = rnd({3, 5}, 3);
    for (std::int64_t i = 0; i < y->numel(); ++i) {
        const double orig = y->data[i];
        y->data[i] = orig + 1e-5;
        const double fp = f(y)->item();
        y->data[i] = orig - 1e-5;
        const double fm = f(y)->item();
        y->data[i] = orig;
        CHECK(std::abs(fp - fm) / 2e-5 < 1e-6);
    }
}

TEST_CASE("grad_check on sum of squares is tight") {
    auto f = [](const TensorPtr<double>& t) { return sum_all(mul(t, t)); };
    CHECK(grad_check(f, rnd({3, 3}, 4), 1e-5) < 1e-7);
}

TEST_CASE("softmax rows sum to one and stay positive") {
    auto y = softmax_lastdim(rnd({40, 17}, 5, 3.0));
    for (std::int64_t i = 0; i < 40; ++i) {
        double s = 0;
        for (std::int64_t j = 0; j < 17; ++j) {
            CHECK(y->data[i * 17 + j] > 0.0);
            s += y->data[i * 17 + j];
        }
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("layernorm rows are standardized before affine") {
    auto y = layernorm_lastdim(rnd({30, 64}, 6, 2.5), 1e-10);
    for (std::int64_t i = 0; i < 30; ++i) {
        double m = 0, v = 0;
        for (std::int64_t j = 0; j < 64; ++j) m += y->data[i * 64 + j];
        m /= 64;
        for (std::int64_t j = 0; j < 64; ++j) {
            const double d = y->data[i * 64 + j] - m;
            v += d * d;
        }
        v /= 64;
        CHECK(std::abs(m) < 1e-6);
        CHECK(std::abs(v - 1.0) < 1e-4);
    }
}

TEST_CASE("reshape and transpose round-trips are bitwise identical") {
    auto x = rnd({6, 10}, 7);
    auto r = reshape(reshape(x, {3, 20}), {6, 10});
    CHECK(std::memcmp(r->data.data(), x->data.data(), sizeof(double) * x->numel()) == 0);
    auto t = transpose_last2(transpose_last2(x));
    CHECK(std::memcmp(t->data.data(), x->data.data(), sizeof(double) * x->numel()) == 0);
}

TEST_CASE("non-finite outputs are rejected with the op name") {
    auto big = full<double>({2}, 1e308);
    CHECK_THROWS_AS(mul(big, big), NumericError);
    CHECK_THROWS_AS(make_tensor<double>({1}, {std::nan("")}), NumericError);
}

TEST_CASE("shape violations are rejected with the offending dimensions") {
    CHECK_THROWS_AS(matmul(rnd({2, 3}, 8), rnd({2, 3}, 9)), ShapeError);
    CHECK_THROWS_AS(add(rnd({2, 3}, 8), rnd({2, 4}, 9)), ShapeError);
    CHECK_THROWS_AS(backward(rnd({2, 2}, 8)), ShapeError);  // non-scalar loss
    CHECK_THROWS_AS(slice_lastdim(rnd({2, 3}, 8), 2, 2), ShapeError);
    CHECK_THROWS_AS(reshape(rnd({2, 3}, 8), {7}), ShapeError);
    CHECK_THROWS_AS(embedding_rows(rnd({4, 2}, 8), {4}), ShapeError);
}

TEST_CASE("broadcast add and mul against explicit loops") {
    auto x = rnd({5, 3}, 10);
    auto row = rnd({1, 3}, 11);
    auto col = rnd({5, 1}, 12);
    auto s = add(x, row);
    auto p = mul(x, col);
    for (std::int64_t i = 0; i < 5; ++i)
        for (std::int64_t j = 0; j < 3; ++j) {
            CHECK(s->data[i * 3 + j] == x->data[i * 3 + j] + row->data[j]);
            CHECK(p->data[i * 3 + j] == x->data[i * 3 + j] * col->data[i]);
        }
}

TEST_CASE("embedding lookup gathers rows and scatters gradients") {
    auto table = make_tensor<double>({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    auto out = embedding_rows(table, {2, 0, 2});
    REQUIRE(out->shape == Shape{3, 2});
    CHECK(out->data == std::vector<double>{5, 6, 1, 2, 5, 6});
    backward(sum_all(out));
    CHECK(table->grad == std::vector<double>{1, 1, 0, 0, 2, 2});
}

// Every primitive passes finite-difference verification in 64-bit mode on
// randomized small shapes.
TEST_CASE("per-primitive gradient sweep") {
    const double kTol = 1e-6;
    const double kEps = 1e-5;
    int seeds_run = 0;
    for (int seed = 0; seed < 50; ++seed) {
        Rng rng(9000 + seed);
        const std::int64_t r = 3 + rng.uniform_int(5);
        const std::int64_t c = 3 + rng.uniform_int(5);

        auto probe = [&](const std::string& name,
                         const std::function<TensorPtr<double>(const TensorPtr<double>&)>& f,
                         const Shape& shape, std::uint64_t s) {
            const double err = grad_check(f, rnd(shape, s), kEps);
            INFO(name, " seed ", seed, " err ", err);
            CHECK(err < kTol);
        };

        auto other = rnd_away({r, c}, 777 + seed);
        auto cvec = rnd_away({1, c}, 778 + seed);
        probe("matmul_lhs",
              [&](const TensorPtr<double>& t) {
                  return sum_all(mul(matmul(t, rnd_away({c, 3}, 5), 0.7), rnd_away({r, 3}, 6)));
              },
              {r, c}, 1000 + seed);
        probe("matmul_rhs",
              [&](const TensorPtr<double>& t) {
                  return sum_all(mul(matmul(rnd_away({3, r}, 5), t, 1.3), rnd_away({3, c}, 6)));
              },
              {r, c}, 1001 + seed);
        probe("add",
              [&](const TensorPtr<double>& t) { return sum_all(mul(add(t, cvec), other)); },
              {r, c}, 1002 + seed);
        probe("sub",
              [&](const TensorPtr<double>& t) { return sum_all(mul(sub(cvec, t), other)); },
              {r, c}, 1003 + seed);
        probe("mul",
              [&](const TensorPtr<double>& t) { return sum_all(mul(mul(t, cvec), other)); },
              {r, c}, 1004 + seed);
        probe("scale",
              [&](const TensorPtr<double>& t) { return sum_all(mul(scale(t, -1.7), other)); },
              {r, c}, 1005 + seed);
        probe("softmax",
              [&](const TensorPtr<double>& t) {
                  return sum_all(mul(softmax_lastdim(t), other));
              },
              {r, c}, 1006 + seed);
        probe("layernorm",
              [&](const TensorPtr<double>& t) {
                  return sum_all(mul(layernorm_lastdim(t, 1e-5), other));
              },
              {r, c}, 1007 + seed);
        probe("relu",
              [&](const TensorPtr<double>& t) {
                  return sum_all(mul(activation(t, Act::relu), other));
              },
              {r, c}, 1008 + seed);
        probe("gelu",
              [&](const TensorPtr<double>& t) {
                  return sum_all(mul(activation(t, Act::gelu), other));
              },
              {r, c}, 1009 + seed);
        probe("tanh",
              [&](const TensorPtr<double>& t) { return sum_all(mul(tanh_op(t), other)); },
              {r, c}, 1010 + seed);
        probe("concat",
              [&](const TensorPtr<double>& t) {
                  return sum_all(mul(concat_lastdim(t, rnd({r, 2}, 12)), rnd_away({r, c + 2}, 13)));
              },
              {r, c}, 1011 + seed);
        probe("sum", [&](const TensorPtr<double>& t) { return sum_all(t); }, {r, c},
              1012 + seed);
        probe("mean", [&](const TensorPtr<double>& t) { return mean_all(t); }, {r, c},
              1013 + seed);
        probe("abs",
              [&](const TensorPtr<double>& t) { return sum_all(mul(abs_op(t), other)); },
              {r, c}, 1014 + seed);
        probe("l2norm",
              [&](const TensorPtr<double>& t) {
                  return sum_all(mul(l2_normalize_lastdim(t, 1e-9), other));
              },
              {r, c}, 1015 + seed);
        probe("slice",
              [&](const TensorPtr<double>& t) {
                  return sum_all(mul(slice_lastdim(t, 1, c), rnd_away({r, c - 1}, 14)));
              },
              {r, c}, 1016 + seed);
        probe("reshape",
              [&](const TensorPtr<double>& t) {
                  return sum_all(mul(reshape(t, {c, r}), rnd_away({c, r}, 15)));
              },
              {r, c}, 1017 + seed);
        probe("transpose",
              [&](const TensorPtr<double>& t) {
                  return sum_all(mul(transpose_last2(t), rnd_away({c, r}, 16)));
              },
              {r, c}, 1018 + seed);
        probe("embedding",
              [&](const TensorPtr<double>& t) {
                  return sum_all(mul(embedding_rows(t, {0, r - 1, 0}), rnd_away({3, c}, 17)));
              },
              {r, c}, 1019 + seed);
        ++seeds_run;
    }
    CHECK(seeds_run >= 50);
}

TEST_CASE("primitive_forward dispatches the whole contract surface") {
    for (const auto& name : primitive_names()) {
        PrimAttrs attrs;
        std::vector<TensorPtr<double>> in;
        if (name == "matmul") {
            in = {rnd({2, 3}, 1), rnd({3, 2}, 2)};
        } else if (name == "add" || name == "mul" || name == "sub" ||
                   name == "concat_lastdim") {
            in = {rnd({2, 3}, 1), rnd({2, 3}, 2)};
        } else if (name == "slice") {
            in = {rnd({2, 3}, 1)};
            attrs.begin = 0;
            attrs.end = 2;
        } else if (name == "reshape") {
            in = {rnd({2, 3}, 1)};
            attrs.shape = {3, 2};
        } else if (name == "embedding_lookup") {
            in = {rnd({4, 3}, 1)};
            attrs.indices = {1, 3};
        } else {
            in = {rnd({2, 3}, 1)};
        }
        CHECK_NOTHROW(primitive_forward(name, in, attrs));
    }
    CHECK_THROWS_AS(primitive_forward<double>("not_an_op", {rnd({1}, 1)}, {}), ShapeError);
}
