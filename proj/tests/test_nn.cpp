#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fedsim/errors.hpp"
#include "fedsim/nn.hpp"
#include "fedsim/rng.hpp"
#include "test_util.hpp"

using namespace fedsim;

namespace {

ModelConfig tiny_mlp(std::size_t in, std::vector<std::size_t> hidden, std::size_t feat,
                     std::size_t outputs, Activation act = Activation::Tanh) {
    ModelConfig mc;
    mc.encoder.kind = EncoderConfig::Kind::Mlp;
    mc.encoder.input_dim = in;
    mc.encoder.hidden = std::move(hidden);
    mc.encoder.mlp_feature_dim = feat;
    mc.encoder.act = act;
    mc.num_outputs = outputs;
    return mc;
}

InputBatch random_batch(std::size_t B, std::size_t dim, std::size_t classes, Rng& rng) {
    InputBatch b;
    b.x = Tensor({B, dim});
    for (auto& v : b.x.v) v = rng.uniform(-1.0, 1.0);
    for (std::size_t i = 0; i < B; ++i)
        b.labels.push_back(static_cast<int>(rng.uniform_int(0, classes - 1)));
    return b;
}

}  // namespace

TEST_CASE("identity-configured encoder passes input through") {
    ModelParams p = init_params(tiny_mlp(3, {}, 3, 2), 1);
    p.encoder[0].t.fill(0.0);
    for (std::size_t i = 0; i < 3; ++i) p.encoder[0].t[i * 3 + i] = 1.0;
    p.encoder[1].t.fill(0.0);

    InputBatch b;
    b.x = Tensor({2, 3}, {0.5, -1.0, 2.0, 0.0, 0.25, -0.75});
    b.labels = {0, 1};
    const FeatureBatch f = encode(p, b);
    CHECK(f.features.v == b.x.v);
}

TEST_CASE("batch equivariance: permuting inputs permutes feature rows") {
    Rng rng(3);
    ModelParams p = init_params(tiny_mlp(5, {7}, 4, 3), 2);
    InputBatch b = random_batch(6, 5, 3, rng);
    const FeatureBatch f = encode(p, b);

    InputBatch rev;
    rev.x = Tensor({6, 5});
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t k = 0; k < 5; ++k) rev.x[i * 5 + k] = b.x[(5 - i) * 5 + k];
    rev.labels.assign(b.labels.rbegin(), b.labels.rend());
    const FeatureBatch g = encode(p, rev);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t k = 0; k < 4; ++k)
            CHECK(g.features[i * 4 + k] == f.features[(5 - i) * 4 + k]);
}

TEST_CASE("random params and inputs produce finite features") {
    Rng rng(4);
    for (std::size_t B : {std::size_t{1}, std::size_t{64}}) {
        ModelParams p = init_params(tiny_mlp(9, {11}, 6, 4), rng.next_u64());
        InputBatch b = random_batch(B, 9, 4, rng);
        const FeatureBatch f = encode(p, b);
        CHECK(f.features.finite());
    }
}

TEST_CASE("classify is the plain affine head") {
    ModelParams p = init_params(tiny_mlp(2, {}, 2, 2), 7);

    SUBCASE("zero weights and bias give zero logits") {
        p.head_w.fill(0.0);
        p.head_b.fill(0.0);
        Tensor f({1, 2}, {3.0, -1.0});
        const Tensor logits = classify(p, f);
        CHECK(logits[0] == 0.0);
        CHECK(logits[1] == 0.0);
    }

    SUBCASE("identity head reproduces features") {
        p.head_w = Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0});
        p.head_b.fill(0.0);
        Tensor f({1, 2}, {3.0, -1.0});
        const Tensor logits = classify(p, f);
        CHECK(logits[0] == 3.0);
        CHECK(logits[1] == -1.0);
    }

    SUBCASE("matches a dense matmul oracle") {
        Rng rng(8);
        ModelParams q = init_params(tiny_mlp(4, {}, 4, 5), 9);
        Tensor f({3, 4});
        for (auto& v : f.v) v = rng.uniform(-2.0, 2.0);
        const Tensor logits = classify(q, f);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 5; ++j) {
                double want = q.head_b[j];
                for (std::size_t k = 0; k < 4; ++k) want += f[i * 4 + k] * q.head_w[j * 4 + k];
                CHECK(std::abs(logits[i * 5 + j] - want) < 1e-12);
            }
    }
}

TEST_CASE("classify is linear in the head parameters (superposition)") {
    Rng rng(10);
    ModelParams a = init_params(tiny_mlp(3, {}, 3, 4), 11);
    ModelParams b = a;
    for (auto& v : b.head_w.v) v = rng.uniform(-1.0, 1.0);
    for (auto& v : b.head_b.v) v = rng.uniform(-1.0, 1.0);
    Tensor f({2, 3});
    for (auto& v : f.v) v = rng.uniform(-1.0, 1.0);

    const double alpha = 0.3, beta = 1.7;
    ModelParams mix = a;
    for (std::size_t i = 0; i < mix.head_w.size(); ++i)
        mix.head_w[i] = alpha * a.head_w[i] + beta * b.head_w[i];
    for (std::size_t i = 0; i < mix.head_b.size(); ++i)
        mix.head_b[i] = alpha * a.head_b[i] + beta * b.head_b[i];

    const Tensor la = classify(a, f), lb = classify(b, f), lm = classify(mix, f);
    for (std::size_t i = 0; i < lm.size(); ++i)
        CHECK(std::abs(lm[i] - (alpha * la[i] + beta * lb[i])) < 1e-12);
}

TEST_CASE("cross entropy closed forms") {
    SUBCASE("uniform logits give ln C") {
        Tensor logits({2, 5});
        logits.fill(0.7);
        CHECK(cross_entropy(logits, {0, 3}) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    }
    SUBCASE("huge correct margin gives ~0") {
        Tensor logits({1, 3}, {50.0, 0.0, 0.0});
        CHECK(cross_entropy(logits, {0}) < 1e-20);
    }
    SUBCASE("matches an extended-precision oracle") {
        Rng rng(12);
        Tensor logits({4, 6});
        for (auto& v : logits.v) v = rng.uniform(-8.0, 8.0);
        std::vector<int> labels = {5, 0, 2, 3};
        long double want = 0.0L;
        for (std::size_t i = 0; i < 4; ++i) {
            long double sum = 0.0L;
            for (std::size_t j = 0; j < 6; ++j)
                sum += expl(static_cast<long double>(logits[i * 6 + j]));
            want += -(static_cast<long double>(
                         logits[i * 6 + static_cast<std::size_t>(labels[i])]) -
                     logl(sum));
        }
        want /= 4.0L;
        CHECK(std::abs(cross_entropy(logits, labels) - static_cast<double>(want)) < 1e-10);
    }
}

TEST_CASE("backward: constant loss yields zero gradients") {
    ModelParams p = init_params(tiny_mlp(3, {4}, 2, 2), 13);
    InputBatch b;
    b.x = Tensor({2, 3}, {1.0, 0.0, -1.0, 0.5, 0.5, 0.5});
    b.labels = {0, 1};
    ForwardCache cache;
    const FeatureBatch f = encode(p, b, &cache);
    Tensor dlogits({2, 2});  // zero upstream gradient
    const GradientSet g = backward(p, cache, f.features, dlogits);
    for (const Tensor* t : g.tensors())
        for (double v : t->v) CHECK(v == 0.0);
}

TEST_CASE("backward: linear model squared error matches the closed form") {
    // identity encoder, loss = (w.x + b - t)^2, dlogits = 2 * residual
    ModelParams p = init_params(tiny_mlp(2, {}, 2, 1), 14);
    p.encoder[0].t = Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0});
    p.encoder[1].t.fill(0.0);
    p.head_w = Tensor({1, 2}, {0.7, -0.3});
    p.head_b = Tensor({1}, {0.1});

    InputBatch b;
    b.x = Tensor({1, 2}, {2.0, 1.0});
    b.labels = {0};
    ForwardCache cache;
    const FeatureBatch f = encode(p, b, &cache);
    const Tensor logits = classify(p, f.features);
    const double target = 0.5;
    Tensor dlogits({1, 1}, {2.0 * (logits[0] - target)});
    const GradientSet g = backward(p, cache, f.features, dlogits);

    const double resid = 2.0 * (logits[0] - target);
    CHECK(g.head_w[0] == doctest::Approx(resid * 2.0).epsilon(1e-12));
    CHECK(g.head_w[1] == doctest::Approx(resid * 1.0).epsilon(1e-12));
    CHECK(g.head_b[0] == doctest::Approx(resid).epsilon(1e-12));
    CHECK(g.encoder[0].t[0] == doctest::Approx(resid * 0.7 * 2.0).epsilon(1e-12));
    CHECK(g.encoder[0].t[1] == doctest::Approx(resid * 0.7 * 1.0).epsilon(1e-12));
    CHECK(g.encoder[0].t[2] == doctest::Approx(resid * -0.3 * 2.0).epsilon(1e-12));
    CHECK(g.encoder[0].t[3] == doctest::Approx(resid * -0.3 * 1.0).epsilon(1e-12));
}

TEST_CASE("backward matches central finite differences on the CE loss") {
    Rng rng(15);
    for (int trial = 0; trial < 5; ++trial) {
        ModelParams p = init_params(tiny_mlp(6, {10}, 8, 3), rng.next_u64());
        InputBatch b = random_batch(4, 6, 3, rng);

        ForwardCache cache;
        const FeatureBatch f = encode(p, b, &cache);
        const Tensor logits = classify(p, f.features);
        const GradientSet analytic =
            backward(p, cache, f.features, cross_entropy_grad(logits, b.labels));

        const GradientSet fd = testutil::finite_diff(p, [&](const ModelParams& q) {
            const FeatureBatch ff = encode(q, b);
            return cross_entropy(classify(q, ff.features), b.labels);
        });
        CHECK(testutil::rel_error(analytic, fd) < 1e-6);
    }
}

TEST_CASE("conv encoder gradients match finite differences") {
    Rng rng(16);
    ModelConfig mc;
    mc.encoder.kind = EncoderConfig::Kind::Conv;
    mc.encoder.in_channels = 1;
    mc.encoder.image_size = 8;
    mc.encoder.channels = {2, 3, 4};
    mc.num_outputs = 3;
    ModelParams p = init_params(mc, 17);

    InputBatch b;
    b.x = Tensor({2, 1, 8, 8});
    for (auto& v : b.x.v) v = rng.uniform(0.0, 1.0);
    b.labels = {0, 2};

    ForwardCache cache;
    const FeatureBatch f = encode(p, b, &cache);
    const Tensor logits = classify(p, f.features);
    const GradientSet analytic =
        backward(p, cache, f.features, cross_entropy_grad(logits, b.labels));
    const GradientSet fd = testutil::finite_diff(p, [&](const ModelParams& q) {
        const FeatureBatch ff = encode(q, b);
        return cross_entropy(classify(q, ff.features), b.labels);
    });
    // relu kinks keep this a bit looser than the smooth mlp case
    CHECK(testutil::rel_error(analytic, fd) < 1e-5);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    ModelParams p = init_params(tiny_mlp(3, {4}, 2, 2), 18);
    const ModelParams before = p;
    OptimizerState st = make_optimizer(p, {1e-3, 1000});
    adam_step(p, zeros_like(p), st, 1);
    CHECK(p == before);
    CHECK(st.step == 1);
}

TEST_CASE("lr schedule halves every 1000 rounds") {
    const LrSchedule s{1e-3, 1000};
    CHECK(s.at_round(1) == 1e-3);
    CHECK(s.at_round(999) == 1e-3);
    CHECK(s.at_round(1000) == 5e-4);
    CHECK(s.at_round(1999) == 5e-4);
    CHECK(s.at_round(2000) == 2.5e-4);
    CHECK(s.at_round(5000) == doctest::Approx(1e-3 * std::pow(0.5, 5)).epsilon(1e-15));
}

TEST_CASE("adam drives a scalar quadratic monotonically below 1e-3 of start") {
    ModelParams p = init_params(tiny_mlp(1, {}, 1, 1), 19);
    p.encoder[0].t[0] = 1.0;  // the optimized scalar
    p.encoder[1].t.fill(0.0);
    p.head_w.fill(0.0);
    p.head_b.fill(0.0);
    OptimizerState st = make_optimizer(p, {6e-3, 0});

    auto loss = [&]() { return p.encoder[0].t[0] * p.encoder[0].t[0]; };
    const double start = loss();
    double prev = start;
    bool reached = false;
    for (int i = 0; i < 200; ++i) {
        GradientSet g = zeros_like(p);
        g.encoder[0].t[0] = 2.0 * p.encoder[0].t[0];
        adam_step(p, g, st, 1);
        const double cur = loss();
        if (!reached) CHECK(cur < prev);  // monotone until the target is hit
        prev = cur;
        if (cur < 1e-3 * start) reached = true;
    }
    CHECK(reached);
}

TEST_CASE("label augmentation") {
    InputBatch b;
    b.x = Tensor({2, 1, 4, 4});
    Rng rng(20);
    for (auto& v : b.x.v) v = rng.uniform(0.0, 1.0);
    b.labels = {1, 2};

    const InputBatch aug = label_augment(b);
    CHECK(aug.batch_size() == 8);

    SUBCASE("rotation 0 copies the image and maps label to 4y") {
        for (std::size_t i = 0; i < 16; ++i) CHECK(aug.x[i] == b.x[i]);
        CHECK(aug.labels[0] == 4);
        CHECK(aug.labels[4] == 8);
    }
    SUBCASE("label multiset is {4y + r}") {
        const std::vector<int> want = {4, 5, 6, 7, 8, 9, 10, 11};
        CHECK(aug.labels == want);
    }
    SUBCASE("four 90-degree rotations are the identity") {
        Tensor img({1, 4, 4});
        for (std::size_t i = 0; i < 16; ++i) img[i] = b.x[i];
        const Tensor r = rotate90(rotate90(rotate90(rotate90(img))));
        CHECK(r.v == img.v);
    }
    SUBCASE("vector data is rejected") {
        InputBatch vec;
        vec.x = Tensor({2, 3});
        vec.labels = {0, 1};
        CHECK_THROWS_AS(label_augment(vec), ConfigError);
    }
}

TEST_CASE("forward/backward are bit-deterministic") {
    Rng rng(21);
    ModelParams p = init_params(tiny_mlp(5, {6}, 4, 3), 22);
    InputBatch b = random_batch(8, 5, 3, rng);

    ForwardCache c1, c2;
    const FeatureBatch f1 = encode(p, b, &c1);
    const FeatureBatch f2 = encode(p, b, &c2);
    CHECK(f1.features.v == f2.features.v);

    const Tensor l1 = classify(p, f1.features);
    const GradientSet g1 = backward(p, c1, f1.features, cross_entropy_grad(l1, b.labels));
    const GradientSet g2 = backward(p, c2, f2.features, cross_entropy_grad(l1, b.labels));
    auto t1 = g1.tensors(), t2 = g2.tensors();
    for (std::size_t i = 0; i < t1.size(); ++i) CHECK(t1[i]->v == t2[i]->v);
}

TEST_CASE("parameter checkpoints round-trip exactly") {
    ModelParams p = init_params(tiny_mlp(4, {5}, 3, 6), 23);
    const auto path = std::filesystem::temp_directory_path() / "fedsim_params_test.bin";
    save_params(path.string(), p);
    const ModelParams q = load_params(path.string());
    CHECK(p == q);
    std::filesystem::remove(path);

    SUBCASE("wrong magic is rejected") {
        const auto bad = std::filesystem::temp_directory_path() / "fedsim_params_bad.bin";
        std::ofstream out(bad, std::ios::binary);
        out << "NOTACKPT-----";
        out.close();
        CHECK_THROWS_AS(load_params(bad.string()), SchemaError);
        std::filesystem::remove(bad);
    }
}
