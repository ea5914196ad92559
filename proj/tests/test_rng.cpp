// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "dog/rng.hpp"

using dog::Stream;

TEST(Stream, SameSeedSameSequence) {
    Stream a(42), b(42);
    for (int i = 0; i < 1000; ++i) ASSERT_EQ(a(), b());
}

TEST(Stream, SplitIsIndependentOfConsumptionOrder) {
    Stream root(7);
    Stream c1 = root.split(1);
    for (int i = 0; i < 100; ++i) root();
    Stream c1_again = Stream(7).split(1);
    for (int i = 0; i < 100; ++i) ASSERT_EQ(c1(), c1_again());
}

TEST(Stream, DistinctChildrenDiffer) {
    Stream root(3);
    std::set<std::uint64_t> firsts;
    for (std::uint64_t id = 0; id < 1000; ++id) firsts.insert(root.split(id)());
    EXPECT_EQ(firsts.size(), 1000u);
}

TEST(Stream, TwoArgumentConstructorEqualsSplit) {
    Stream a(11, 5), b = Stream(11).split(5);
    for (int i = 0; i < 10; ++i) ASSERT_EQ(a(), b());
}

TEST(Stream, UniformMoments) {
    Stream r(1);
    const int n = 200000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        s += u;
        s2 += u * u;
    }
    const double mean = s / n, var = s2 / n - mean * mean;
    EXPECT_NEAR(mean, 0.5, 3 * std::sqrt(1.0 / 12 / n) + 1e-12);
    EXPECT_NEAR(var, 1.0 / 12, 0.002);
}

TEST(Stream, NormalMoments) {
    Stream r(2);
    const int n = 200000;
    double s = 0, s2 = 0, s4 = 0;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        s += z;
        s2 += z * z;
        s4 += z * z * z * z;
    }
    EXPECT_NEAR(s / n, 0.0, 3.0 / std::sqrt(n));
    EXPECT_NEAR(s2 / n, 1.0, 3.0 * std::sqrt(2.0 / n));
    EXPECT_NEAR(s4 / n, 3.0, 0.1);
}

TEST(Stream, BelowIsUnbiasedAndInRange) {
    Stream r(9);
    std::vector<int> counts(7, 0);
    const int n = 70000;
    for (int i = 0; i < n; ++i) {
        const auto k = r.below(7);
        ASSERT_LT(k, 7u);
        ++counts[k];
    }
    const double p = 1.0 / 7, sd = std::sqrt(n * p * (1 - p));
    for (int c : counts) EXPECT_NEAR(c, n * p, 4 * sd);
}

TEST(Stream, BernoulliRate) {
    Stream r(4);
    const int n = 100000;
    int hits = 0;
    for (int i = 0; i < n; ++i) hits += r.bernoulli(0.1);
    EXPECT_NEAR(hits, 0.1 * n, 3 * std::sqrt(n * 0.09));
}
