#include <gtest/gtest.h>

#include "cen/checkpoint.hpp"
#include "cen/optim.hpp"

using namespace cen;

namespace {

Parameter<double> scalar_param(double value, double grad) {
    Parameter<double> p{"p", Tensor<double>::scalar(value)};
    p.value.set_requires_grad();
    p.value.ensure_grad()[0] = grad;
    return p;
}

double first_step_delta(double g, double lr) {
    Adam<double> adam;
    std::vector<Parameter<double>> ps{scalar_param(0.0, g)};
    adam.step(ps, lr);
    return ps[0].value.item();
}

}  // namespace

TEST(Adam, FirstStepIsSignTimesLr) {
    // g = 3: |Δp| = lr·3/(3 + 1e-8), within 1e-8 of lr.
    EXPECT_NEAR(first_step_delta(3.0, 1e-4), -1e-4, 1e-8);
    EXPECT_NEAR(first_step_delta(-3.0, 1e-4), 1e-4, 1e-8);
}

TEST(Adam, FirstStepClosedForm) {
    // Bias correction leaves m̂ = g and √v̂ = |g| exactly, so Δp = -lr·g/(|g| + ε).
    for (double g : {1e-3, -0.02, 0.5, 7.0, -1e3}) {
        const double lr = 1e-4;
        EXPECT_NEAR(first_step_delta(g, lr), -lr * g / (std::abs(g) + 1e-8), 1e-18) << g;
    }
}

TEST(Adam, ZeroGradientLeavesParameter) {
    Adam<double> adam;
    std::vector<Parameter<double>> ps{scalar_param(1.25, 0.0)};
    for (int i = 0; i < 5; ++i) {
        ps[0].value.ensure_grad()[0] = 0.0;
        adam.step(ps, 1e-3);
    }
    EXPECT_EQ(ps[0].value.item(), 1.25);
}

TEST(Adam, DescendsOnQuadratic) {
    Adam<double> adam;
    std::vector<Parameter<double>> ps{scalar_param(1.0, 0.0)};
    double prev = 1.0;
    for (int i = 0; i < 10; ++i) {
        const double p = ps[0].value.item();
        ps[0].value.ensure_grad()[0] = 2.0 * p;  // d/dp p²
        adam.step(ps, 1e-2);
        const double f = ps[0].value.item() * ps[0].value.item();
        EXPECT_LT(f, prev);
        prev = f;
    }
}

TEST(Adam, StateInvariants) {
    Adam<float> adam;
    std::vector<Parameter<float>> ps{{"w", Tensor<float>(Shape{2, 3, 1, 1})}};
    ps[0].value.set_requires_grad();
    Rng rng(1);
    for (std::uint64_t t = 1; t <= 4; ++t) {
        for (auto& g : ps[0].value.ensure_grad()) g = static_cast<float>(rng.uniform(-1, 1));
        adam.step(ps, 1e-3);
        EXPECT_EQ(adam.steps(), t);
        const auto& slot = adam.slots().at("w");
        EXPECT_EQ(slot.m.shape(), ps[0].value.shape());
        EXPECT_EQ(slot.v.shape(), ps[0].value.shape());
        for (float v : slot.v.data()) EXPECT_GE(v, 0.0f);
        for (float g : ps[0].value.grad()) EXPECT_EQ(g, 0.0f);  // zeroed after the step
    }
}

TEST(Adam, MissingGradientNamesParameter) {
    Adam<float> adam;
    std::vector<Parameter<float>> ps{{"enc0.bb.conv1.weight", Tensor<float>(Shape{1, 1, 1, 1})}};
    try {
        adam.step(ps, 1e-3);
        FAIL();
    } catch (const ContractError& e) {
        EXPECT_NE(std::string(e.what()).find("enc0.bb.conv1.weight"), std::string::npos);
    }
    ps[0].value.ensure_grad();
    EXPECT_THROW(adam.step(ps, 0.0), ContractError);
}

TEST(Adam, RescalingInvarianceProperty) {
    // Doubling every gradient changes the first update by about ε/(2|g|)
    // relative, below 1e-6 once |g| ≥ 1e-2.
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const double mag = std::pow(10.0, rng.uniform(-2.0, 2.0));
        const double g = rng.coin() ? mag : -mag;
        const double a = first_step_delta(g, 1e-4);
        const double b = first_step_delta(2.0 * g, 1e-4);
        EXPECT_LT(std::abs(a - b) / std::abs(a), 1e-6) << g;
    }
}

TEST(Adam, RescalingDeviationAtSmallGradient) {
    // At |g| = 1e-3 the relative change is about 5e-6.
    const double g = 1e-3;
    const double a = first_step_delta(g, 1e-4);
    const double b = first_step_delta(2.0 * g, 1e-4);
    const double expected = std::abs(g / (g + 1e-8) - 2 * g / (2 * g + 1e-8)) / (g / (g + 1e-8));
    EXPECT_NEAR(std::abs(a - b) / std::abs(a), expected, 1e-12);
    EXPECT_GT(expected, 1e-6);
}

// --- schedule ---------------------------------------------------------------

TEST(Schedule, DefaultValues) {
    const StepDecaySchedule s;
    EXPECT_EQ(s.initial_lr, 1e-4);
    EXPECT_EQ(s.decay_factor, 2.0);
    EXPECT_EQ(s.decay_every, 128000u);
    EXPECT_EQ(s.total_iters, 640000u);
    EXPECT_EQ(lr_at(s, 0), 1e-4);
    EXPECT_EQ(lr_at(s, 128000), 5e-5);
    EXPECT_EQ(lr_at(s, 639999), 1e-4 / 16.0);
    EXPECT_EQ(lr_at(s, 127999), 1e-4);
}

TEST(Schedule, NonIncreasingPiecewiseConstantProperty) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        StepDecaySchedule s;
        s.initial_lr = rng.uniform(1e-5, 1e-2);
        s.decay_factor = rng.uniform(1.0, 4.0);
        s.decay_every = 1 + rng.below(50);
        double prev = s.lr_at(0);
        for (std::uint64_t i = 1; i < 400; ++i) {
            const double lr = s.lr_at(i);
            EXPECT_LE(lr, prev);
            if (i % s.decay_every != 0) {
                EXPECT_EQ(lr, prev) << i;
            }
            prev = lr;
        }
    }
}

TEST(Schedule, Validation) {
    StepDecaySchedule s;
    s.decay_every = 0;
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s = {};
    s.decay_factor = 0.5;
    EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Adam, StateSurvivesCheckpointBitExact) {
    NetworkConfig cfg;
    cfg.num_stages = 1;
    cfg.base_channels = 2;
    auto net = make_network<float>(cfg, 4);
    Adam<float> adam;
    Rng rng(5);
    for (int step = 0; step < 3; ++step) {
        for (auto& p : net.parameters())
            for (auto& g : p.value.ensure_grad()) g = static_cast<float>(rng.uniform(-1, 1));
        adam.step(net.parameters(), 1e-3);
    }
    const Checkpoint ckpt = decode_checkpoint(encode_checkpoint(make_checkpoint(net, 3, &adam)));
    Adam<float> restored;
    apply_optimizer_state(ckpt, restored);
    EXPECT_EQ(restored.steps(), adam.steps());
    ASSERT_EQ(restored.slots().size(), adam.slots().size());
    for (const auto& [name, s] : adam.slots()) {
        const auto& r = restored.slots().at(name);
        EXPECT_EQ(std::memcmp(r.m.data().data(), s.m.data().data(), s.m.numel() * sizeof(float)), 0) << name;
        EXPECT_EQ(std::memcmp(r.v.data().data(), s.v.data().data(), s.v.numel() * sizeof(float)), 0) << name;
    }
}
