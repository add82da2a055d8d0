#include <gtest/gtest.h>

#include <cmath>

#include "filmseg/gradcheck.hpp"
#include "filmseg/optim.hpp"
#include "filmseg/rng.hpp"
#include "oracles.hpp"

using namespace filmseg;

TEST(SoftDice, Examples) {
    const Tensor<double> t(Shape{1, 1, 2, 2}, std::vector<double>{1, 1, 0, 0});
    EXPECT_EQ(soft_dice_loss(t, t), 0.0);
    const Tensor<double> z(Shape{1, 1, 2, 2});
    EXPECT_EQ(soft_dice_loss(z, z), 0.0);
    const Tensor<double> half(Shape{1, 1, 2, 2}, 0.5);
    // 2 * 1 / (1 + 2) overlap.
    EXPECT_NEAR(soft_dice_loss(half, t, 0.0), 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(soft_dice_loss(half, t), 1.0 / 3.0, 1e-5);
    EXPECT_THROW(soft_dice_loss(half, Tensor<double>(Shape{1, 1, 4, 1})), DimensionError);
}

TEST(SoftDice, RangeAndGradient) {
    CounterRng rng(8, Stream::Test, 8);
    for (int trial = 0; trial < 5; ++trial) {
        const auto p = random_tensor({1, 1, 8, 8}, rng);
        Tensor<double> prob(p.shape()), target = random_mask({1, 1, 8, 8}, rng);
        for (std::size_t i = 0; i < p.size(); ++i) prob[i] = 1.0 / (1.0 + std::exp(-p[i]));
        const double l = soft_dice_loss(prob, target);
        EXPECT_GE(l, 0.0);
        EXPECT_LE(l, 1.0);
        const auto r = check_gradients("soft_dice_loss", {prob}, [&](Tape<double>& t, const std::vector<Var>& in) {
            return soft_dice_loss(t, in[0], t.constant(target), 1e-5);
        });
        EXPECT_TRUE(r.passed) << r.max_rel_error;
        EXPECT_LT(r.max_rel_error, 1e-4);
    }
}

TEST(SoftDice, MonotoneInTruePositiveProbability) {
    CounterRng rng(9, Stream::Test, 9);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor<double> pred(Shape{1, 1, 8, 8}), gt(Shape{1, 1, 8, 8});
        for (std::size_t i = 0; i < pred.size(); ++i) {
            pred[i] = 0.01 + 0.98 * rng.uniform();
            gt[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
        }
        gt[rng.below(64)] = 1.0;
        const double base = soft_dice_loss(pred, gt);
        for (std::size_t i = 0; i < pred.size(); ++i) {
            if (gt[i] != 1.0) continue;
            Tensor<double> up = pred;
            up[i] = pred[i] + (1.0 - pred[i]) * rng.uniform();
            EXPECT_LE(soft_dice_loss(up, gt), base + 1e-15);
        }
    }
}

TEST(DiceScore, Examples) {
    Tensor<float> a(Shape{8, 8}), b(Shape{8, 8});
    for (std::size_t i : {0u, 1u, 2u, 3u}) a[i] = 1;
    EXPECT_EQ(dice_score(a, a), 1.0);
    for (std::size_t i : {40u, 41u, 42u, 43u}) b[i] = 1;
    EXPECT_EQ(dice_score(a, b), 0.0);
    Tensor<float> c(Shape{8, 8});
    for (std::size_t i : {2u, 3u, 20u, 21u}) c[i] = 1;
    EXPECT_EQ(dice_score(a, c), 0.5);
    EXPECT_EQ(dice_score(Tensor<float>(Shape{8, 8}), Tensor<float>(Shape{8, 8})), 1.0);
    c[5] = 0.5f;
    EXPECT_THROW(dice_score(a, c), ValidationError);
    EXPECT_THROW(dice_score(a, Tensor<float>(Shape{4, 16})), DimensionError);
}

TEST(DiceScore, MatchesSetOracleAndIsSymmetric) {
    CounterRng rng(10, Stream::Test, 10);
    for (int trial = 0; trial < 100; ++trial) {
        const double pa = rng.uniform(), pb = rng.uniform();
        Tensor<double> a(Shape{1, 1, 8, 8}), b(Shape{1, 1, 8, 8});
        std::vector<int> va(64), vb(64);
        for (std::size_t i = 0; i < 64; ++i) {
            va[i] = rng.uniform() < pa;
            vb[i] = rng.uniform() < pb;
            a[i] = va[i];
            b[i] = vb[i];
        }
        EXPECT_DOUBLE_EQ(dice_score(a, b), oracle::dice_by_sets(va, vb));
        EXPECT_EQ(dice_score(a, b), dice_score(b, a));
    }
}

namespace {

ModelParams<double> scalar_params(double v) {
    ModelParams<double>::Map m;
    m.emplace("w", Tensor<double>(Shape{1}, v));
    return ModelParams<double>(std::move(m));
}

std::map<std::string, Tensor<double>> scalar_grad(double g) { return {{"w", Tensor<double>(Shape{1}, g)}}; }

} // namespace

TEST(Adam, ZeroGradientLeavesParameters) {
    auto p = scalar_params(0.7);
    AdamState<double> s;
    adam_step(p, scalar_grad(0.0), s, 1e-3);
    EXPECT_EQ(p.at("w")[0], 0.7);
    EXPECT_EQ(s.step, 1u);
}

TEST(Adam, SingleStepClosedForm) {
    for (double g : {0.3, -2.0, 1e-3}) {
        auto p = scalar_params(1.0);
        AdamState<double> s;
        adam_step(p, scalar_grad(g), s, 0.01);
        EXPECT_NEAR(p.at("w")[0] - 1.0, -0.01 * g / (std::abs(g) + 1e-8), 1e-15);
    }
}

TEST(Adam, MatchesScalarRecurrence) {
    CounterRng rng(12, Stream::Test, 12);
    auto p = scalar_params(0.5);
    AdamState<double> s;
    oracle::ScalarAdam ref;
    double theta = 0.5;
    for (int step = 0; step < 2; ++step) {
        adam_step(p, scalar_grad(0.25), s, 1e-3);
        theta = ref.step(theta, 0.25, 1e-3);
        EXPECT_NEAR(p.at("w")[0], theta, 1e-12);
    }
    for (int step = 0; step < 50; ++step) {
        const double g = rng.normal();
        adam_step(p, scalar_grad(g), s, 5e-4);
        theta = ref.step(theta, g, 5e-4);
    }
    EXPECT_NEAR(p.at("w")[0], theta, 1e-12);
    EXPECT_GE(s.v.at("w")[0], 0.0);
}

TEST(Adam, StepOneIsScaleEquivariant) {
    for (double c : {1e-2, 1.0, 1e3}) {
        auto p = scalar_params(0.0);
        AdamState<double> s;
        s.eps = 0.0;
        adam_step(p, scalar_grad(c * 0.4), s, 1e-3);
        EXPECT_NEAR(std::abs(p.at("w")[0]), 1e-3, 1e-6);
    }
}

TEST(Adam, ShapeErrors) {
    auto p = scalar_params(0.0);
    AdamState<double> s;
    EXPECT_THROW(adam_step(p, {{"w", Tensor<double>(Shape{2})}}, s, 1e-3), DimensionError);
    EXPECT_THROW(adam_step(p, {{"nope", Tensor<double>(Shape{1})}}, s, 1e-3), DimensionError);
    EXPECT_EQ(s.step, 0u);
}

TEST(CosineLr, Examples) {
    EXPECT_DOUBLE_EQ(cosine_lr(0, 30, 1e-3, 1e-5), 1e-3);
    EXPECT_NEAR(cosine_lr(15, 30, 1e-3, 1e-5), (1e-3 + 1e-5) / 2, 1e-18);
    EXPECT_DOUBLE_EQ(cosine_lr(30, 30, 1e-3, 1e-5), 1e-5);
    for (std::size_t e = 1; e <= 30; ++e) EXPECT_LE(cosine_lr(e, 30, 1e-3, 0), cosine_lr(e - 1, 30, 1e-3, 0));
    EXPECT_THROW(cosine_lr(31, 30, 1e-3, 0), UsageError);
}
