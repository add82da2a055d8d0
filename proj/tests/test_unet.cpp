#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "filmseg/film.hpp"
#include "filmseg/rng.hpp"
#include "filmseg/unet.hpp"

using namespace filmseg;

namespace {

Tensor<double> random_image(Shape s, std::uint64_t key) {
    CounterRng rng(11, Stream::Test, key);
    Tensor<double> t(std::move(s));
    for (auto& v : t.values()) v = rng.normal();
    return t;
}

Tensor<double> one_hot_batch(std::vector<std::size_t> idx, std::size_t width) {
    Tensor<double> z(Shape{idx.size(), width});
    for (std::size_t n = 0; n < idx.size(); ++n) z[n * width + idx[n]] = 1.0;
    return z;
}

ModelConfig cfg(std::size_t depth, std::size_t base, std::size_t cond) {
    ModelConfig c;
    c.depth = depth;
    c.base_channels = base;
    c.conditioning_size = cond;
    c.film_hidden = 8;
    return c;
}

} // namespace

TEST(ModelConfig, Validation) {
    EXPECT_THROW(UNet<float>(cfg(1, 16, 0)), ConfigError);
    EXPECT_THROW(UNet<float>(cfg(5, 16, 0)), ConfigError);
    EXPECT_THROW(UNet<float>(cfg(2, 3, 0)), ConfigError);
    EXPECT_NO_THROW(UNet<float>(cfg(4, 4, 2)));
}

TEST(UNet, OutputShapeAndRangeForEveryDepth) {
    for (std::size_t depth : {2u, 3u, 4u}) {
        UNet<double> net(cfg(depth, 4, 0));
        const auto params = net.init_params(1);
        const auto y = net.predict(params, random_image({1, 1, 48, 48}, depth));
        ASSERT_EQ(y.shape(), (Shape{1, 1, 48, 48})) << "depth " << depth;
        for (double v : y.values()) {
            EXPECT_GT(v, 0.0);
            EXPECT_LT(v, 1.0);
        }
    }
}

TEST(UNet, ParameterNamesFollowConfig) {
    UNet<float> base(cfg(2, 4, 0)), film(cfg(2, 4, 2));
    const auto bn = base.parameter_names(), fn = film.parameter_names();
    EXPECT_TRUE(bn.count("enc.0.conv1.kernel"));
    EXPECT_TRUE(bn.count("mid.affine2.gamma"));
    EXPECT_FALSE(std::any_of(bn.begin(), bn.end(), [](const auto& n) { return n.starts_with("film."); }));
    EXPECT_FALSE(fn.count("mid.affine2.gamma"));
    // Two sites per block, 2 * depth + 1 blocks.
    EXPECT_EQ(film.film_sites(), 10u);
    EXPECT_TRUE(fn.count("film.9.gen.beta.bias"));
    EXPECT_FALSE(fn.count("film.10.gen.beta.bias"));
    EXPECT_EQ(film.init_params(1).names().size(), fn.size());
}

TEST(UNet, InitIsDeterministicWithZeroBiases) {
    UNet<float> net(cfg(2, 8, 2));
    const auto a = net.init_params(5), b = net.init_params(5), c = net.init_params(6);
    EXPECT_TRUE(a == b);
    EXPECT_FALSE(a == c);
    for (const auto& [name, t] : a.tensors()) {
        if (!name.ends_with(".bias") || name.ends_with(".gamma.bias")) continue;
        for (float v : t.values()) EXPECT_EQ(v, 0.0f) << name;
    }
}

TEST(UNet, HeNormalStandardDeviation) {
    // mid.conv2 at base 16, depth 2 has 64 input channels: fan-in 576 and
    // 64 * 576 = 36864 weights.
    UNet<double> net(cfg(2, 16, 0));
    const auto params = net.init_params(3);
    const auto& k = params.at("mid.conv2.kernel");
    ASSERT_EQ(k.shape(), (Shape{64, 64, 3, 3}));
    double s = 0, ss = 0;
    for (double v : k.values()) s += v;
    const double mean = s / static_cast<double>(k.size());
    for (double v : k.values()) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(k.size() - 1));
    const double target = std::sqrt(2.0 / 576.0);
    EXPECT_GE(sd, 0.8 * target);
    EXPECT_LE(sd, 1.2 * target);
}

TEST(UNet, FreshGeneratorsEmitIdentity) {
    UNet<double> net(cfg(2, 4, 2));
    const auto params = net.init_params(9);
    const Vocabulary vocab;
    for (std::size_t site = 0; site < net.film_sites(); ++site) {
        for (const auto& label : vocab.names()) {
            const auto p = film_generate(encode_contrast(label, vocab), net.film_generator(params, site));
            for (double g : p.gamma.values()) EXPECT_EQ(g, 1.0);
            for (double b : p.beta.values()) EXPECT_EQ(b, 0.0);
        }
    }
}

namespace {

// Baseline params sharing every backbone tensor of `film`, with identity
// affine slots.
ModelParams<double> baseline_twin(const UNet<double>& base_net, const ModelParams<double>& film) {
    auto base = base_net.init_params(0);
    for (const auto& name : base.names()) {
        if (film.contains(name)) base.set(name, film.at(name));
    }
    return base;
}

} // namespace

TEST(UNet, FilmAtInitMatchesBaseline) {
    UNet<double> film_net(cfg(3, 4, 2)), base_net(cfg(3, 4, 0));
    const auto film = film_net.init_params(21);
    const auto base = baseline_twin(base_net, film);
    const auto x = random_image({2, 1, 48, 48}, 1);
    const auto z = one_hot_batch({0, 1}, 2);
    const auto yf = film_net.predict(film, x, &z);
    const auto yb = base_net.predict(base, x);
    EXPECT_LE(max_abs_diff(yf, yb), 1e-12);
}

TEST(UNet, ForcedIdentityMatchesBaselineForArbitraryWeights) {
    UNet<double> film_net(cfg(2, 4, 2)), base_net(cfg(2, 4, 0));
    auto film = film_net.init_params(4);
    CounterRng rng(4, Stream::Test, 77);
    for (const auto& name : film.names()) {
        auto& t = film.at(name);
        if (name.ends_with(".running_var")) {
            for (auto& v : t.values()) v = 0.5 + rng.uniform();
        } else {
            for (auto& v : t.values()) v = 0.5 * rng.normal();
        }
    }
    // Generator hidden layers stay random; only the heads are forced.
    for (std::size_t site = 0; site < film_net.film_sites(); ++site) {
        const auto g = UNet<double>::film_prefix(site);
        film.at(g + ".gamma.weight").fill(0.0);
        film.at(g + ".gamma.bias").fill(1.0);
        film.at(g + ".beta.weight").fill(0.0);
        film.at(g + ".beta.bias").fill(0.0);
    }
    const auto base = baseline_twin(base_net, film);
    const auto x = random_image({3, 1, 16, 16}, 2);
    const auto z = one_hot_batch({1, 0, 1}, 2);
    EXPECT_LE(max_abs_diff(film_net.predict(film, x, &z), base_net.predict(base, x)), 1e-12);

    // Train mode as well.
    Tape<double> tf, tb;
    const auto vf = film_net.bind(tf, film, true);
    const auto vb = base_net.bind(tb, base, true);
    const Var yf = film_net.forward(tf, vf, film, tf.constant(x), tf.constant(z), NormMode::Train);
    const Var yb = base_net.forward(tb, vb, base, tb.constant(x), std::nullopt, NormMode::Train);
    EXPECT_LE(max_abs_diff(tf.value(yf), tb.value(yb)), 1e-12);
}

TEST(UNet, RepeatedForwardIsBitwiseIdentical) {
    UNet<float> net(cfg(2, 8, 2));
    const auto params = net.init_params(2);
    const auto x = random_image({2, 1, 48, 48}, 3).cast<float>();
    const auto z = one_hot_batch({0, 1}, 2).cast<float>();
    EXPECT_TRUE(net.predict(params, x, &z) == net.predict(params, x, &z));
}

TEST(UNet, BatchPermutationInInferMode) {
    UNet<double> net(cfg(2, 4, 2));
    auto params = net.init_params(8);
    CounterRng rng(8, Stream::Test, 8);
    for (const auto& name : params.names()) {
        if (name.find(".gen.") != std::string::npos) {
            for (auto& v : params.at(name).values()) v += 0.3 * rng.normal();
        }
    }
    const std::size_t N = 4, px = 16 * 16;
    const auto x = random_image({N, 1, 16, 16}, 4);
    const auto z = one_hot_batch({0, 1, 1, 0}, 2);
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    Tensor<double> xp(x.shape()), zp(z.shape());
    for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(x.data() + perm[n] * px, px, xp.data() + n * px);
        std::copy_n(z.data() + perm[n] * 2, 2, zp.data() + n * 2);
    }
    const auto y = net.predict(params, x, &z), yp = net.predict(params, xp, &zp);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < px; ++i) EXPECT_EQ(yp[n * px + i], y[perm[n] * px + i]);
}

TEST(UNet, ConditioningErrors) {
    UNet<double> film(cfg(2, 4, 2)), base(cfg(2, 4, 0));
    const auto pf = film.init_params(1), pb = base.init_params(1);
    const auto x = random_image({2, 1, 16, 16}, 5);
    EXPECT_THROW(film.predict(pf, x), UsageError);
    const auto z1 = one_hot_batch({0}, 2);
    EXPECT_THROW(film.predict(pf, x, &z1), DimensionError);
    const auto z2 = one_hot_batch({0, 1}, 2);
    EXPECT_THROW(base.predict(pb, x, &z2), UsageError);
    EXPECT_THROW(film.predict(pb, x, &z2), std::exception);
    EXPECT_THROW(film.check_params(pb), FormatError);
    EXPECT_THROW(base.predict(pb, random_image({1, 1, 18, 16}, 6)), ConfigError);
}
