#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>

#include "gradcheck.hpp"
#include "hybridlm/vision.hpp"

using namespace hlm;
using namespace hlm::vision;

static Image noise_image(size_t side, uint64_t seed) {
    Rng rng(seed);
    Image img = Image::create(side, side, 3);
    for (auto& p : img.pixels) p = rng.uniform();
    return img;
}

TEST_CASE("token geometry: 96px / patch 4 -> 576 -> 144") {
    EncoderConfig cfg;
    cfg.n_layers = 1;
    auto enc = VisionEncoder::init(cfg);
    auto grid = enc.encode(noise_image(96, 1));
    CHECK(grid.count() == 576);
    CHECK(grid.g == 24);

    auto p2 = pool2d(grid, 2);
    CHECK(p2.count() == 144);
    CHECK(p2.g == 12);

    auto p1 = pool1d(grid, 4);
    CHECK(p1.tokens.rows() == 144);
}

TEST_CASE("encode is deterministic and rejects size mismatch") {
    EncoderConfig cfg;
    cfg.input_side = 24;
    cfg.n_layers = 1;
    cfg.d_vision = 16;
    auto enc = VisionEncoder::init(cfg);
    auto img = noise_image(24, 2);
    auto g1 = enc.encode(img);
    auto g2 = enc.encode(img);
    CHECK(g1.tokens.data() == g2.tokens.data());
    CHECK_THROWS_AS(enc.encode(noise_image(32, 2)), ShapeError);
}

TEST_CASE("constant image gives identical patch embeddings before attention") {
    EncoderConfig cfg;
    cfg.input_side = 24;
    cfg.d_vision = 16;
    auto enc = VisionEncoder::init(cfg);
    Image img = Image::create(24, 24, 3, 0.4);
    Tensor pe = enc.patchify_embed(img);
    size_t d = pe.cols();
    for (size_t t = 1; t < pe.rows(); ++t)
        for (size_t j = 0; j < d; ++j) CHECK(pe.data()[t * d + j] == pe.data()[j]);
}

TEST_CASE("pool2d: constant grid, direct mean, divisibility") {
    PatchGrid g;
    g.g = 2;
    g.d_vision = 2;
    g.tokens = Tensor::make({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});  // a,b,c,d
    auto p = pool2d(g, 2);
    CHECK(p.count() == 1);
    CHECK(p.tokens.data()[0] == doctest::Approx((1 + 3 + 5 + 7) / 4.0));
    CHECK(p.tokens.data()[1] == doctest::Approx((2 + 4 + 6 + 8) / 4.0));

    PatchGrid c;
    c.g = 4;
    c.d_vision = 1;
    c.tokens = Tensor::full({16, 1}, 0.7);
    auto pc = pool2d(c, 2);
    for (double v : pc.tokens.data()) CHECK(v == doctest::Approx(0.7));

    CHECK_THROWS_AS(pool2d(c, 3), ShapeError);
}

TEST_CASE("pool2d vs pool1d differ on 2x2-constant grids with varying raster blocks") {
    // 4x4 grid, each 2x2 spatial block constant, blocks distinct
    PatchGrid g;
    g.g = 4;
    g.d_vision = 1;
    std::vector<double> vals(16);
    double blocks[2][2] = {{1.0, 2.0}, {3.0, 4.0}};
    for (size_t y = 0; y < 4; ++y)
        for (size_t x = 0; x < 4; ++x) vals[y * 4 + x] = blocks[y / 2][x / 2];
    g.tokens = Tensor::make({16, 1}, std::move(vals));
    auto p2 = pool2d(g, 2);   // -> exactly the block values
    auto p1 = pool1d(g, 4);   // mixes raster runs crossing block boundaries
    REQUIRE(p2.count() == 4);
    REQUIRE(p1.tokens.rows() == 4);
    CHECK(p2.tokens.data() == std::vector<double>{1, 2, 3, 4});
    CHECK(p1.tokens.data() != p2.tokens.data());
}

TEST_CASE("pool2d idempotence under replication upsample") {
    Rng rng(5);
    PatchGrid g;
    g.g = 4;
    g.d_vision = 3;
    g.tokens = Tensor::randn(rng, {16, 3}, 1.0);
    auto p = pool2d(g, 2);
    // upsample by replication then pool again
    PatchGrid up;
    up.g = 4;
    up.d_vision = 3;
    std::vector<double> u(16 * 3);
    for (size_t y = 0; y < 4; ++y)
        for (size_t x = 0; x < 4; ++x)
            for (size_t j = 0; j < 3; ++j)
                u[(y * 4 + x) * 3 + j] = p.tokens.data()[((y / 2) * 2 + x / 2) * 3 + j];
    up.tokens = Tensor::make({16, 3}, std::move(u));
    auto p2 = pool2d(up, 2);
    for (size_t i = 0; i < p.tokens.numel(); ++i)
        CHECK(p2.tokens.data()[i] == doctest::Approx(p.tokens.data()[i]).epsilon(1e-12));
}

TEST_CASE("pool2d commutes with per-channel affine maps") {
    Rng rng(6);
    PatchGrid g;
    g.g = 4;
    g.d_vision = 2;
    g.tokens = Tensor::randn(rng, {16, 2}, 1.0);
    double a = 2.5, b = -0.3;
    PatchGrid ga = g;
    {
        std::vector<double> t = g.tokens.data();
        for (auto& v : t) v = a * v + b;
        ga.tokens = Tensor::make({16, 2}, std::move(t));
    }
    auto lhs = pool2d(ga, 2);
    auto rhs = pool2d(g, 2);
    for (size_t i = 0; i < lhs.tokens.numel(); ++i)
        CHECK(lhs.tokens.data()[i] ==
              doctest::Approx(a * rhs.tokens.data()[i] + b).epsilon(1e-12));
}

TEST_CASE("projector: zero token, permutation equivariance, gradient check") {
    Rng rng(7);
    auto proj = Projector::init(rng, 8, 12, 6);
    auto z = proj.forward(Tensor::zeros({1, 8}));
    for (double v : z.data()) CHECK(v == 0.0);  // zero biases at init

    Tensor toks = Tensor::randn(rng, {3, 8}, 1.0);
    auto out = proj.forward(toks);
    // permute rows 0<->2
    std::vector<double> perm = toks.data();
    for (size_t j = 0; j < 8; ++j) std::swap(perm[j], perm[2 * 8 + j]);
    auto out_p = proj.forward(Tensor::make({3, 8}, std::move(perm)));
    for (size_t j = 0; j < 6; ++j) {
        CHECK(out.data()[j] == out_p.data()[2 * 6 + j]);
        CHECK(out.data()[2 * 6 + j] == out_p.data()[j]);
    }

    CHECK_THROWS_AS(proj.forward(Tensor::zeros({2, 5})), ShapeError);

    std::vector<Tensor> params;
    for (auto& [n, t] : proj.named_params()) {
        const_cast<Tensor&>(t).set_requires_grad(true);
        params.push_back(t);
    }
    auto res = hlm_test::grad_check(params, [&] {
        return reduce_mean(mul(proj.forward(toks), proj.forward(toks)));
    });
    INFO(res.where, " rel=", res.worst_rel);
    CHECK(res.ok);
}

TEST_CASE("segment_image: tile counts and partition property") {
    // exactly one tile
    auto one = segment_image(noise_image(32, 8), 32);
    CHECK(one.subimages.size() == 1);
    CHECK(one.rows == 1);
    CHECK(one.cols == 1);

    // 2x3 tiles
    Image wide = Image::create(64, 96, 3, 0.5);
    auto seg = segment_image(wide, 32);
    CHECK(seg.rows == 2);
    CHECK(seg.cols == 3);
    CHECK(seg.subimages.size() == 6);

    // ceil-division count for non-multiples (toy analog of 1024x768 at scaled tiles)
    Image odd = Image::create(96 * 2 / 3 + 1, 96, 3, 0.1);  // 65 x 96
    auto s2 = segment_image(odd, 96);
    CHECK(s2.subimages.size() == size_t((65 + 95) / 96) * size_t(1));

    // partition: every source pixel appears exactly once across subimages
    Image src = noise_image(48, 9);
    auto s3 = segment_image(src, 32);  // pads to 64x64, 2x2 tiles
    double sum_src = 0.0, sum_tiles = 0.0;
    for (double p : src.pixels) sum_src += p;
    for (auto& t : s3.subimages)
        for (double p : t.pixels) sum_tiles += p;
    CHECK(sum_tiles == doctest::Approx(sum_src).epsilon(1e-12));  // padding is zero
}

TEST_CASE("raster image file round-trip") {
    auto img = noise_image(16, 10);
    std::string path = "/tmp/hlm_test_img.bin";
    save_image(img, path);
    auto back = load_image(path);
    CHECK(back.width == 16);
    CHECK(back.height == 16);
    CHECK(back.channels == 3);
    for (size_t i = 0; i < img.pixels.size(); ++i)
        CHECK(std::fabs(back.pixels[i] - img.pixels[i]) < 1e-6);  // float32 payload
    std::remove(path.c_str());
    CHECK_THROWS(load_image("/tmp/definitely_missing_image.bin"));
}
