#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "bai/schedule.hpp"

using namespace bai;

namespace {

LambdaSchedule eq5(double eta, double gamma, double phi, double iters) {
    LambdaSchedule s;
    s.eta = eta;
    s.gamma = gamma;
    s.phi = phi;
    s.iters_per_epoch = iters;
    return s;
}

}  // namespace

TEST(Schedule, MidpointValue) {
    auto s = eq5(1e-3, 0.5, 15, 100);
    EXPECT_NEAR(lambda_weight(s, 1500), 0.5005, 1e-12);
    for (double eta : {0.0, 0.2, 0.9}) {
        s.eta = eta;
        EXPECT_NEAR(lambda_weight(s, 1500), eta + 0.5 * (1 - eta), 1e-12);
    }
}

TEST(Schedule, StartValueAgainstExtendedPrecision) {
    auto s = eq5(1e-3, 0.5, 15, 100);
    const long double sig = 1.0L / (1.0L + std::exp(30.0L));
    const long double expected = 1e-3L + sig * (1.0L - 1e-3L);
    EXPECT_NEAR(lambda_weight(s, 0), static_cast<double>(expected), 1e-18);
    // the quoted 13-digit value drops the (1 - eta) factor; 2e-16 covers that
    EXPECT_NEAR(lambda_weight(s, 0), 1.0000000000936e-3, 2e-16);
}

TEST(Schedule, Limits) {
    auto s = eq5(1e-3, 0.5, 15, 100);
    EXPECT_DOUBLE_EQ(lambda_weight(s, 1e9), 1.0);
    EXPECT_DOUBLE_EQ(lambda_weight(s, -1e9), 1e-3);
}

TEST(Schedule, MonotoneAndInsideRange) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> eta(0.0, 0.5), gamma(0.05, 5.0), phi(-5.0, 40.0);
    for (int trial = 0; trial < 20; ++trial) {
        auto s = eq5(eta(rng), gamma(rng), phi(rng), 37);
        double prev = -1;
        for (int t = 0; t < 100000; t += 7) {
            const double v = lambda_weight(s, t);
            ASSERT_GE(v, prev);
            ASSERT_GE(v, s.eta);
            ASSERT_LE(v, 1.0);
            prev = v;
        }
    }
}

TEST(Schedule, Presets) {
    LambdaSchedule base = eq5(0.3, 0.5, 2, 10);
    for (double t : {0.0, 5.0, 123.0, 1e6}) {
        EXPECT_EQ(lambda_weight(schedule_preset("l1", base), t), 1e-3);
        EXPECT_EQ(lambda_weight(schedule_preset("l2", base), t), 1e-6);
        EXPECT_EQ(lambda_weight(schedule_preset("l3", base), t), 1.0);
    }
    auto l4 = schedule_preset("l4", base), l5 = schedule_preset("l5", base);
    for (double e : {0.0, 1.0, 7.5, 15.0, 29.0, 30.0}) {
        const double t = e * 10;
        EXPECT_DOUBLE_EQ(lambda_weight(l4, t), 1e-6 + (1 - 1e-6) * (e / 30.0));
        EXPECT_DOUBLE_EQ(lambda_weight(l5, t), (1 - 1e-6) * (30.0 - e) / 30.0 + 1e-6);
    }
    EXPECT_EQ(lambda_weight(l4, 1000), 1.0);
    EXPECT_EQ(lambda_weight(l5, 1000), 0.0);
    auto lstar = schedule_preset("eq5", base);
    EXPECT_EQ(lambda_weight(lstar, 20), lambda_weight(base, 20));
}

TEST(Schedule, Errors) {
    auto s = eq5(1e-3, 0.0, 15, 10);
    EXPECT_THROW(lambda_weight(s, 1), ConfigError);
    s.gamma = -1;
    EXPECT_THROW(lambda_weight(s, 1), ConfigError);
    s = eq5(1e-3, 0.5, 15, 0.0);
    EXPECT_THROW(lambda_weight(s, 1), ConfigError);
    EXPECT_THROW(schedule_preset("l6", LambdaSchedule{}), ConfigError);
    try {
        schedule_preset("nope", LambdaSchedule{});
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("l5"), std::string::npos);
    }
}
