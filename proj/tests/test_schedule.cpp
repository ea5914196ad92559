// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "dog/gmm.hpp"
#include "dog/schedule.hpp"
#include "test_util.hpp"

using namespace dog;
using namespace testutil;

TEST(Schedule, SingleStep) {
    const auto s = linear_schedule(1, 0.1, 0.1);
    ASSERT_EQ(s.T(), 1);
    EXPECT_DOUBLE_EQ(s.abar(1), 0.9);
}

TEST(Schedule, DefaultTerminalAbar) {
    // Exact rational product of the 1000 factors, evaluated offline.
    const auto s = linear_schedule();
    EXPECT_NEAR(s.abar(1000), 4.0358297653756835e-05, 1e-15);
    EXPECT_NEAR(s.abar(1000), 4.04e-5, 0.01e-5);
    EXPECT_DOUBLE_EQ(s.beta(1), 1e-4);
    EXPECT_DOUBLE_EQ(s.beta(1000), 0.02);
}

TEST(Schedule, AbarMatchesRecomputedProduct) {
    for (auto [T, b0, b1] : {std::tuple{1000, 1e-4, 0.02}, {50, 1e-3, 0.3}, {7, 0.2, 0.2}}) {
        const auto s = linear_schedule(T, b0, b1);
        long double prod = 1.0L;
        for (int t = 1; t <= T; ++t) {
            prod *= 1.0L - static_cast<long double>(s.beta(t));
            EXPECT_LT(std::abs(static_cast<long double>(s.abar(t)) - prod), 1e-12L);
        }
    }
}

TEST(Schedule, AbarStrictlyDecreasingAndComplementExact) {
    const auto s = linear_schedule();
    EXPECT_LT(s.abar(1), 1.0);
    EXPECT_GT(s.abar(s.T()), 0.0);
    for (int t = 1; t <= s.T(); ++t) {
        if (t > 1) {
            EXPECT_LT(s.abar(t), s.abar(t - 1));
        }
        EXPECT_EQ(s.bbar(t) + s.abar(t), 1.0);
    }
    EXPECT_EQ(s.abar(0), 1.0);
    EXPECT_EQ(s.bbar(0), 0.0);
}

TEST(Schedule, RejectsBadParameters) {
    EXPECT_THROW(linear_schedule(0), InvalidInput);
    EXPECT_THROW(linear_schedule(10, 0.0, 0.1), InvalidInput);
    EXPECT_THROW(linear_schedule(10, 0.2, 0.1), InvalidInput);
    EXPECT_THROW(linear_schedule(10, 0.1, 1.0), InvalidInput);
    const auto s = linear_schedule(10, 0.01, 0.1);
    EXPECT_THROW((void)s.abar(11), InvalidInput);
    EXPECT_THROW((void)s.beta(0), InvalidInput);
}

TEST(Schedule, FingerprintNamesParameters) {
    EXPECT_EQ(linear_schedule().fingerprint(), "linear:T=1000:beta=0.0001..0.02");
}

TEST(ForwardNoise, Examples) {
    EXPECT_EQ(forward_noise(vec2(1, 2), 0.64, vec2(0, 0)), vec2(0.8, 1.6));
    EXPECT_EQ(forward_noise(vec2(1, 2), 1.0, vec2(5, -3)), vec2(1, 2));
    const Vec x = forward_noise(vec2(1, 0), 0.25, vec2(0, 2));
    EXPECT_NEAR(x[0], 0.5, 1e-15);
    EXPECT_NEAR(x[1], std::sqrt(3.0), 1e-15);
    EXPECT_THROW(forward_noise(vec2(1, 0), 0.0, vec2(0, 0)), InvalidInput);
}

TEST(ForwardNoise, MatchesNoisedMarginalMoments) {
    Stream r(1);
    const auto mix = random_mixture(r, 3);
    const auto s = linear_schedule();
    for (int t : {10, 200, 700}) {
        Stream d(2, static_cast<std::uint64_t>(t));
        PointSet x = sample(mix, 100000, d);
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            x.row(i) = forward_noise(x.row(i).transpose(), s.abar(t), vec2(d.normal(), d.normal())).transpose();
        const auto m = moments(x);
        const auto exact = noised_marginal(mix, s.abar(t));
        const Vec mu = mixture_mean(exact);
        const Mat cov = mixture_cov(exact);
        for (int j = 0; j < 2; ++j) EXPECT_NEAR(m.mean[j], mu[j], 3 * m.mean_se[j]);
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) EXPECT_NEAR(m.cov(i, j), cov(i, j), 3 * m.cov_se(i, j));
    }
}

TEST(EpsScore, ZeroAndRoundTrip) {
    EXPECT_EQ(eps_to_score(vec2(0, 0), 0.3), vec2(0, 0));
    Stream r(3);
    for (int i = 0; i < 100; ++i) {
        const Vec v = vec2(r.normal(), r.normal());
        const double abar = r.uniform(1e-4, 0.9999);
        EXPECT_LT((score_to_eps(eps_to_score(v, abar), abar) - v).cwiseAbs().maxCoeff(), 1e-15 * std::max(1.0, v.norm()) * 4);
    }
}

TEST(EpsScore, RejectsUnitAbar) {
    EXPECT_THROW(eps_to_score(vec2(1, 0), 1.0), InvalidInput);
    EXPECT_THROW(score_to_eps(vec2(1, 0), 1.0), InvalidInput);
    EXPECT_THROW(eps_to_score(vec2(1, 0), 0.0), InvalidInput);
}

TEST(TimestepSubsequence, FullSequence) {
    const auto ts = timestep_subsequence(1000, 1000);
    ASSERT_EQ(ts.size(), 1000u);
    for (int k = 0; k < 1000; ++k) EXPECT_EQ(ts[static_cast<std::size_t>(k)], 1000 - k);
}

TEST(TimestepSubsequence, TwentySteps) {
    const auto ts = timestep_subsequence(1000, 20);
    ASSERT_EQ(ts.size(), 20u);
    EXPECT_EQ(ts.front(), 1000);
    EXPECT_EQ(ts.back(), 1);
    const double stride = 999.0 / 19;
    for (std::size_t k = 1; k < ts.size(); ++k) {
        EXPECT_LT(ts[k], ts[k - 1]);
        EXPECT_LE(std::abs((ts[k - 1] - ts[k]) - stride), 1.0);
    }
}

TEST(TimestepSubsequence, SingleStepAndErrors) {
    EXPECT_EQ(timestep_subsequence(1000, 1), std::vector<int>{1000});
    EXPECT_THROW(timestep_subsequence(10, 11), InvalidInput);
    EXPECT_THROW(timestep_subsequence(10, 0), InvalidInput);
}
