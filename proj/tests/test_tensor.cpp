#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "gradcheck.hpp"
#include "hybridlm/tensor.hpp"

using namespace hlm;

TEST_CASE("matmul identity and dot product") {
    Tensor eye = Tensor::make({2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::make({2, 2}, {3, 4, 5, 6});
    Tensor c = matmul(eye, b);
    CHECK(c.data() == b.data());

    Tensor a = Tensor::make({1, 2}, {1, 2});
    Tensor d = Tensor::make({2, 1}, {3, 4});
    CHECK(matmul(a, d).item() == doctest::Approx(11).epsilon(1e-15));
}

TEST_CASE("matmul matches triple-loop oracle") {
    Rng rng(7);
    Tensor a = Tensor::randn(rng, {4, 5}, 1.0);
    Tensor b = Tensor::randn(rng, {5, 3}, 1.0);
    Tensor c = matmul(a, b);
    for (size_t i = 0; i < 4; ++i)
        for (size_t j = 0; j < 3; ++j) {
            double s = 0.0;
            for (size_t k = 0; k < 5; ++k) s += a.data()[i * 5 + k] * b.data()[k * 3 + j];
            CHECK(std::fabs(c.data()[i * 3 + j] - s) < 1e-12);
        }
}

TEST_CASE("matmul rejects dimension mismatch naming shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2,3]"), ShapeError);
}

TEST_CASE("softmax symmetry, stability, normalization") {
    Tensor x = Tensor::make({3}, {0, 0, 0});
    auto y = softmax_lastdim(x);
    for (double v : y.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-14));

    Tensor big = Tensor::make({2}, {1000, 0});
    auto yb = softmax_lastdim(big);
    CHECK(yb.data()[0] == doctest::Approx(1.0));
    CHECK(yb.data()[1] == doctest::Approx(0.0));

    Rng rng(3);
    Tensor r = Tensor::randn(rng, {7}, 2.0);
    auto yr = softmax_lastdim(r);
    double s = 0.0;
    for (double v : yr.data()) {
        CHECK(v >= 0.0);
        s += v;
    }
    CHECK(std::fabs(s - 1.0) < 1e-12);

    Tensor inf = Tensor::make({2}, {std::numeric_limits<double>::infinity(), 0.0});
    CHECK_THROWS(softmax_lastdim(inf));
}

TEST_CASE("elementwise suite basics") {
    CHECK(silu(Tensor::scalar(0.0)).item() == 0.0);
    CHECK(reduce_sum(Tensor::full({3, 4}, 1.0)).item() == doctest::Approx(12.0));

    Tensor logits = Tensor::zeros({1, 8});
    CHECK(cross_entropy(logits, {5}).item() == doctest::Approx(std::log(8.0)).epsilon(1e-14));
    CHECK_THROWS_AS(cross_entropy(logits, {9}), ShapeError);
}

TEST_CASE("reshape and transpose round-trip") {
    Rng rng(11);
    Tensor x = Tensor::randn(rng, {3, 4}, 1.0);
    CHECK(reshape(reshape(x, {12}), {3, 4}).data() == x.data());
    CHECK(transpose(transpose(x)).data() == x.data());
}

TEST_CASE("backward on sums") {
    Tensor x = Tensor::make({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    backward(reduce_sum(x));
    for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));

    Tensor y = Tensor::make({3}, {1, 2, 3}, true);
    backward(reduce_sum(mul(y, y)));
    CHECK(y.grad()[0] == doctest::Approx(2.0));
    CHECK(y.grad()[1] == doctest::Approx(4.0));
    CHECK(y.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("backward requires scalar loss") {
    Tensor x = Tensor::zeros({2, 2}, true);
    CHECK_THROWS_AS(backward(add(x, x)), ShapeError);
}

TEST_CASE("composite MLP gradients match finite differences") {
    Rng rng(42);
    Tensor w1 = Tensor::randn(rng, {5, 7}, 0.5, true);
    Tensor b1 = Tensor::randn(rng, {7}, 0.5, true);
    Tensor w2 = Tensor::randn(rng, {7, 3}, 0.5, true);
    Tensor x = Tensor::randn(rng, {4, 5}, 1.0);
    auto loss = [&] {
        Tensor h = silu(add_bias(matmul(x, w1), b1));
        Tensor out = matmul(h, w2);
        return cross_entropy(out, {0, 2, 1, 2});
    };
    auto res = hlm_test::grad_check({w1, b1, w2}, loss);
    INFO(res.where, " rel=", res.worst_rel);
    CHECK(res.ok);
}

TEST_CASE("primitive gradient checks on random inputs") {
    Rng rng(99);
    // each primitive exercised inside a scalar loss
    Tensor a = Tensor::randn(rng, {3, 4}, 1.0, true);
    Tensor b = Tensor::randn(rng, {3, 4}, 1.0, true);
    Tensor m = Tensor::randn(rng, {4, 2}, 1.0, true);
    Tensor g = Tensor::randn(rng, {4}, 0.3, true);

    auto check = [&](std::vector<Tensor> ps, std::function<Tensor()> f) {
        auto res = hlm_test::grad_check(ps, f);
        INFO(res.where, " rel=", res.worst_rel);
        CHECK(res.ok);
    };

    check({a, b}, [&] { return reduce_mean(mul(add(a, b), b)); });
    check({a, m}, [&] { return reduce_sum(matmul(a, m)); });
    check({a}, [&] { return reduce_sum(mul(exp_(scale(a, 0.3)), a)); });
    check({a}, [&] { return reduce_sum(log_(add(mul(a, a), Tensor::full({3, 4}, 1.0)))); });
    check({a}, [&] { return reduce_sum(softmax_lastdim(a)); });
    check({a}, [&] { return reduce_mean(mul(softmax_lastdim(a), a)); });
    check({a}, [&] { return reduce_sum(mul(causal_softmax(matmul(a, transpose(b)), 0), matmul(a, transpose(b)))); });
    check({a, g}, [&] { return reduce_mean(rmsnorm_op(a, g, 1e-6)); });
    check({a, g}, [&] { return reduce_sum(mul(col_scale(a, g), a)); });
    check({a}, [&] { return reduce_sum(gelu(a)); });
    check({a}, [&] { return reduce_sum(softplus(a)); });
    Tensor w33 = Tensor::randn(rng, {3, 3}, 1.0);
    check({a}, [&] { return reduce_mean(mul(concat_cols({slice_cols(a, 1, 2), slice_cols(a, 0, 1)}), w33)); });
}

TEST_CASE("scan and scatter gradient checks") {
    Rng rng(123);
    Tensor decay_raw = Tensor::randn(rng, {6, 8}, 0.5, true);
    Tensor inc = Tensor::randn(rng, {6, 8}, 1.0, true);
    auto check = [&](std::vector<Tensor> ps, std::function<Tensor()> f) {
        auto res = hlm_test::grad_check(ps, f);
        INFO(res.where, " rel=", res.worst_rel);
        CHECK(res.ok);
    };
    check({decay_raw, inc}, [&] {
        Tensor d = exp_(neg(mul(decay_raw, decay_raw)));  // decays in (0,1]
        return reduce_mean(mul(linear_scan(d, inc), inc));
    });

    Tensor table = Tensor::randn(rng, {10, 4}, 1.0, true);
    check({table}, [&] { return reduce_mean(mul(embedding_rows(table, {3, 3, 7}),
                                                embedding_rows(table, {1, 3, 9}))); });

    Tensor base = Tensor::randn(rng, {5, 4}, 1.0, true);
    Tensor patch = Tensor::randn(rng, {2, 4}, 1.0, true);
    check({base, patch}, [&] {
        return reduce_mean(mul(row_scatter(base, patch, {1, 3}), base));
    });

    Tensor u = Tensor::randn(rng, {5, 3}, 1.0, true);
    Tensor A = Tensor::randn(rng, {3, 4}, 1.0, true);
    Tensor B = Tensor::randn(rng, {5, 4}, 1.0, true);
    check({u, A}, [&] { return reduce_mean(mul(outer_mul(u, A), outer_mul(u, A))); });
    check({u, B}, [&] { return reduce_mean(mul(chan_state_mul(u, B), chan_state_mul(u, B))); });
    Tensor h = Tensor::randn(rng, {5, 12}, 1.0, true);
    check({h, B}, [&] { return reduce_mean(mul(state_readout(h, B, 4), u)); });

    Tensor cw = Tensor::randn(rng, {3, 4}, 0.5, true);
    Tensor cx = Tensor::randn(rng, {6, 3}, 1.0, true);
    check({cx, cw}, [&] { return reduce_mean(mul(conv_causal(cx, cw), cx)); });
}

TEST_CASE("determinism: same seed reproduces bitwise") {
    Rng r1(555), r2(555);
    Tensor a = Tensor::randn(r1, {16}, 1.0);
    Tensor b = Tensor::randn(r2, {16}, 1.0);
    CHECK(a.data() == b.data());
}
