#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fedsim/errors.hpp"
#include "fedsim/fractal.hpp"

using namespace fedsim;

namespace {

double nonzero_fraction(const Tensor& img) {
    std::size_t nz = 0;
    for (double v : img.v)
        if (v > 0.0) ++nz;
    return static_cast<double>(nz) / static_cast<double>(img.size());
}

}  // namespace

TEST_CASE("singular values of hand-built maps") {
    AffineMap half{{0.5, 0.0, 0.0, 0.5}, {0.0, 0.0}};
    CHECK(half.max_singular_value() == doctest::Approx(0.5).epsilon(1e-12));
    AffineMap stretch{{2.0, 0.0, 0.0, 0.25}, {0.0, 0.0}};
    CHECK(stretch.max_singular_value() == doctest::Approx(2.0).epsilon(1e-12));
    AffineMap rot{{0.0, -0.7, 0.7, 0.0}, {0.0, 0.0}};
    CHECK(rot.max_singular_value() == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("sampled codes satisfy the contraction band and det floor") {
    Rng rng(5);
    IfsSamplerConfig cfg;
    for (int draw = 0; draw < 100; ++draw) {
        const auto code = sample_ifs(static_cast<int>(rng.uniform_int(2, 5)), rng, cfg);
        double prob_sum = 0.0, mean_sv = 0.0;
        for (std::size_t i = 0; i < code.maps.size(); ++i) {
            CHECK(std::abs(code.maps[i].det()) >= cfg.det_floor);
            CHECK(code.maps[i].max_singular_value() <= cfg.map_singular_cap);
            CHECK(code.probs[i] >= 0.0);
            prob_sum += code.probs[i];
            mean_sv += code.probs[i] * code.maps[i].max_singular_value();
        }
        CHECK(prob_sum == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(mean_sv >= cfg.contraction_lo);
        CHECK(mean_sv <= cfg.contraction_hi);
    }
}

TEST_CASE("num_maps outside [2,8] is rejected") {
    Rng rng(6);
    CHECK_THROWS_AS(sample_ifs(1, rng), ConfigError);
    CHECK_THROWS_AS(sample_ifs(9, rng), ConfigError);
}

TEST_CASE("single contraction renders a single bright cell") {
    // one map, fixed point (1,1): the whole post-burn-in orbit sits there
    IfsCode code;
    code.maps = {AffineMap{{0.5, 0.0, 0.0, 0.5}, {0.5, 0.5}}};
    code.probs = {1.0};
    Rng rng(7);
    const Tensor img = render_fractal(code, 16, 2000, rng);
    std::size_t bright = 0;
    for (double v : img.v)
        if (v > 0.0) ++bright;
    CHECK(bright == 1);
}

TEST_CASE("rendering is deterministic in (code, seed)") {
    Rng crng(8);
    const auto code = sample_ifs(3, crng);
    Rng r1(99), r2(99);
    const Tensor a = render_fractal(code, 32, 5000, r1);
    const Tensor b = render_fractal(code, 32, 5000, r2);
    CHECK(a.v == b.v);
}

TEST_CASE("sierpinski gasket mass lands on the analytic attractor") {
    // corners (0,0), (1,0), (0,1): the attractor is the set of points whose
    // binary expansions of x and y share no 1-bit, so on a 32x32 grid the
    // occupied cells are exactly those with (ix & iy) == 0
    IfsCode code;
    code.maps = {AffineMap{{0.5, 0.0, 0.0, 0.5}, {0.0, 0.0}},
                 AffineMap{{0.5, 0.0, 0.0, 0.5}, {0.5, 0.0}},
                 AffineMap{{0.5, 0.0, 0.0, 0.5}, {0.0, 0.5}}};
    code.probs = {1.0 / 3, 1.0 / 3, 1.0 / 3};
    Rng rng(9);
    const std::size_t size = 32;
    const Tensor img = render_fractal(code, size, 60000, rng);

    double mass_total = 0.0, mass_on = 0.0;
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double v = img[y * size + x];
            mass_total += v;
            if ((x & y) == 0) mass_on += v;
        }
    CHECK(mass_on / mass_total > 0.9);

    const double fill = nonzero_fraction(img);
    CHECK(fill >= 0.05);
    CHECK(fill <= 0.60);
}

TEST_CASE("escaping orbits raise a divergence error") {
    IfsCode code;
    code.maps = {AffineMap{{3.0, 0.0, 0.0, 3.0}, {1.0, 1.0}},
                 AffineMap{{2.5, 0.0, 0.0, 2.5}, {-1.0, 0.5}}};
    code.probs = {0.5, 0.5};
    Rng rng(10);
    CHECK_THROWS_AS(render_fractal(code, 16, 2000, rng), NumericError);
}

TEST_CASE("build_pretrain_dataset structure and fill bounds") {
    FractalBuildConfig cfg;
    cfg.render_iterations = 3000;
    const auto ds = build_pretrain_dataset(4, 3, 16, 11, cfg);
    CHECK(ds.classes.size() == 4);
    CHECK(ds.images.size() == 12);
    for (int y : ds.images.labels) CHECK(y < 4);
    for (std::size_t c = 0; c < 4; ++c) {
        // the canonical (unjittered) render is the acceptance probe's subject
        const double fill = nonzero_fraction(ds.images.samples[c * 3]);
        CHECK(fill >= cfg.min_fill);
        CHECK(fill <= cfg.max_fill);
    }

    SUBCASE("single class, single image") {
        const auto tiny = build_pretrain_dataset(1, 1, 16, 12, cfg);
        CHECK(tiny.images.size() == 1);
        CHECK(tiny.images.labels[0] == 0);
    }

    SUBCASE("same-class images correlate above cross-class average") {
        auto corr = [&](const Tensor& a, const Tensor& b) {
            double ma = 0.0, mb = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i) {
                ma += a[i];
                mb += b[i];
            }
            ma /= static_cast<double>(a.size());
            mb /= static_cast<double>(b.size());
            double num = 0.0, da = 0.0, db = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i) {
                num += (a[i] - ma) * (b[i] - mb);
                da += (a[i] - ma) * (a[i] - ma);
                db += (b[i] - mb) * (b[i] - mb);
            }
            return num / std::sqrt(da * db + 1e-30);
        };
        double intra = 0.0, cross = 0.0;
        int n_intra = 0, n_cross = 0;
        for (std::size_t c = 0; c < 4; ++c)
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = i + 1; j < 3; ++j) {
                    intra += corr(ds.images.samples[c * 3 + i], ds.images.samples[c * 3 + j]);
                    ++n_intra;
                }
        for (std::size_t c1 = 0; c1 < 4; ++c1)
            for (std::size_t c2 = c1 + 1; c2 < 4; ++c2) {
                cross += corr(ds.images.samples[c1 * 3], ds.images.samples[c2 * 3]);
                ++n_cross;
            }
        CHECK(intra / n_intra > cross / n_cross);
    }
}

TEST_CASE("pretrain with zero epochs returns the input model") {
    FractalBuildConfig cfg;
    cfg.render_iterations = 2000;
    const auto ds = build_pretrain_dataset(2, 2, 16, 13, cfg);

    ModelConfig mc;
    mc.encoder.kind = EncoderConfig::Kind::Conv;
    mc.encoder.in_channels = 1;
    mc.encoder.image_size = 16;
    mc.encoder.channels = {2, 3, 4};
    mc.num_outputs = 2;
    const ModelParams model = init_params(mc, 14);
    const ModelParams after = pretrain(model, ds.images, 0, 2, {1e-3, 0}, 15);
    CHECK(model == after);
}

TEST_CASE("pretrain requires a wide enough head") {
    FractalBuildConfig cfg;
    cfg.render_iterations = 2000;
    const auto ds = build_pretrain_dataset(3, 1, 16, 16, cfg);
    ModelConfig mc;
    mc.encoder.kind = EncoderConfig::Kind::Conv;
    mc.encoder.in_channels = 1;
    mc.encoder.image_size = 16;
    mc.encoder.channels = {2, 3, 4};
    mc.num_outputs = 2;  // narrower than 3 classes
    const ModelParams model = init_params(mc, 17);
    CHECK_THROWS_AS(pretrain(model, ds.images, 1, 2, {1e-3, 0}, 18), ConfigError);
}

TEST_CASE("slice_head keeps the encoder and the leading head rows") {
    ModelConfig mc;
    mc.encoder.kind = EncoderConfig::Kind::Mlp;
    mc.encoder.input_dim = 4;
    mc.encoder.hidden = {5};
    mc.encoder.mlp_feature_dim = 3;
    mc.num_outputs = 10;
    const ModelParams big = init_params(mc, 19);

    SUBCASE("identity when target equals the head width") {
        const ModelParams same = slice_head(big, 10);
        CHECK(same == big);
    }

    SUBCASE("rows are preserved verbatim") {
        const ModelParams small = slice_head(big, 4);
        CHECK(small.config.num_outputs == 4);
        for (std::size_t j = 0; j < 4; ++j) {
            CHECK(small.head_b[j] == big.head_b[j]);
            for (std::size_t k = 0; k < 3; ++k)
                CHECK(small.head_w[j * 3 + k] == big.head_w[j * 3 + k]);
        }
        // encoder untouched, bit for bit
        for (std::size_t i = 0; i < big.encoder.size(); ++i)
            CHECK(small.encoder[i].t.v == big.encoder[i].t.v);
    }

    SUBCASE("slicing is a projection: twice equals once") {
        const ModelParams once = slice_head(big, 6);
        const ModelParams twice = slice_head(slice_head(big, 6), 6);
        CHECK(once == twice);
    }

    SUBCASE("widening is rejected") {
        CHECK_THROWS_AS(slice_head(big, 11), ConfigError);
    }
}

TEST_CASE("fractal dataset files round-trip") {
    FractalBuildConfig cfg;
    cfg.render_iterations = 2000;
    const auto ds = build_pretrain_dataset(3, 2, 16, 20, cfg);
    const auto path = std::filesystem::temp_directory_path() / "fedsim_fractal_test.bin";
    save_fractal_dataset(path.string(), ds);

    const LabeledDataset images = load_fractal_images(path.string());
    CHECK(images.num_classes == 3);
    CHECK(images.size() == 6);
    for (std::size_t i = 0; i < images.size(); ++i) {
        CHECK(images.labels[i] == ds.images.labels[i]);
        // float32 storage: exact to single precision
        for (std::size_t k = 0; k < images.samples[i].size(); ++k)
            CHECK(images.samples[i][k] ==
                  doctest::Approx(ds.images.samples[i][k]).epsilon(1e-7));
    }

    const FractalDataset full = load_fractal_dataset(path.string());
    CHECK(full.classes.size() == 3);
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(full.classes[c].probs == ds.classes[c].probs);
        CHECK(full.classes[c].maps == ds.classes[c].maps);
    }
    std::filesystem::remove(path);
    std::filesystem::remove(path.string() + ".codes.json");
}
