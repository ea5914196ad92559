// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "dog/guidance.hpp"
#include "dog/mlp.hpp"
#include "test_util.hpp"

using namespace dog;
using namespace testutil;

namespace {

const NoiseSchedule& sched() {
    static const NoiseSchedule s = linear_schedule();
    return s;
}

MlpDenoiser random_net(std::uint64_t seed) {
    MlpArch arch;
    arch.hidden = 16;
    arch.time_dim = 8;
    MlpParams p(arch);
    Stream r(seed);
    for (std::size_t b = 0; b < MlpParams::block_count; ++b)
        for (Eigen::Index i = 0; i < p.block(b).size(); ++i) p.block(b).data()[i] = r.uniform(-0.5, 0.5);
    return MlpDenoiser(std::move(p), sched());
}

PointSet grid_points(int n, double lo, double hi) {
    PointSet g(n * n, 2);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) g.row(i * n + j) << lo + (hi - lo) * i / (n - 1), lo + (hi - lo) * j / (n - 1);
    return g;
}

}  // namespace

TEST(Combine, Examples) {
    const Vec a = vec2(1, 2), b = vec2(-3, 0.5);
    EXPECT_EQ(combine(a, b, 1.0), a);
    EXPECT_EQ(combine(a, b, 0.0), b);
    EXPECT_EQ(combine(vec2(2, 0), vec2(0, 0), 3.0), vec2(6, 0));
    EXPECT_EQ(combine(vec2(1, 1), vec2(1, 1), 7.5), vec2(1, 1));
    EXPECT_THROW(combine(a, Vec::Zero(3), 2.0), InvalidInput);
}

TEST(Combine, SwapIdentity) {
    // w a - (w - 1) b = (1 - w) b - (-w) a
    Stream r(1);
    for (int i = 0; i < 100; ++i) {
        const Vec a = vec2(r.normal(), r.normal()), b = vec2(r.normal(), r.normal());
        const double w = r.uniform(-3, 5);
        EXPECT_LT((combine(a, b, w) - combine(b, a, 1 - w)).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Guidance, TwoEvaluationsPerStep) {
    const auto cond = random_net(1), guide = random_net(2);
    const CountingDenoiser cc(cond), cg(guide);
    PointSet x = grid_points(3, -1, 1);
    for (GuidanceMode m : {GuidanceMode::cfg, GuidanceMode::dog}) {
        const CountingDenoiser c1(cond), g1(guide);
        (void)guided_eps_batch({m, 2.0, &c1, &g1}, x, 10, 0);
        EXPECT_EQ(c1.conditional_evaluations(), 9u);
        EXPECT_EQ(c1.null_evaluations(), 0u);
        EXPECT_EQ(g1.null_evaluations(), 9u);
        EXPECT_EQ(g1.conditional_evaluations(), 0u);
    }
    (void)guided_eps_batch({GuidanceMode::none, 2.0, &cc, &cg}, x, 10, 0);
    EXPECT_EQ(cc.conditional_evaluations(), 9u);
    EXPECT_EQ(cg.null_evaluations() + cg.conditional_evaluations(), 0u);
}

TEST(Guidance, IdenticalModelsCollapseModes) {
    const auto net = random_net(3);
    const PointSet x = grid_points(4, -2, 2);
    const PointSet base = net.eps_batch(x, 100, null_class);
    for (double w : {0.0, 1.5, 4.0}) {
        // With both branches equal, the guided output equals the unguided one.
        EXPECT_LT((guided_eps_batch({GuidanceMode::cfg, w, &net, &net}, x, 100, null_class) - base).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT((guided_eps_batch({GuidanceMode::dog, w, &net, &net}, x, 100, null_class) - base).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Guidance, MatchesHandAssembledOracle) {
    const auto w = small_world();
    const WorldOracles o(w, sched());
    const Vec x = vec2(0.4, -0.2);
    for (int t : {1, 300, 900}) {
        const double abar = sched().abar(t);
        const Vec ec = -std::sqrt(1 - abar) * score(noised_marginal(w.class_conditional(1), abar), x);
        const Vec es = -std::sqrt(1 - abar) * score(noised_marginal(w.source(), abar), x);
        const Vec et = -std::sqrt(1 - abar) * score(noised_marginal(w.target(), abar), x);
        EXPECT_LT((guided_eps(o.dog(3.0), x, t, 1) - (3 * ec - 2 * es)).norm(), 1e-12);
        EXPECT_LT((guided_eps(o.cfg(3.0), x, t, 1) - (3 * ec - 2 * et)).norm(), 1e-12);
    }
}

TEST(Guidance, RequiresGuideForGuidedModes) {
    const auto net = random_net(4);
    const Vec x = vec2(0, 0);
    EXPECT_THROW((void)guided_eps({GuidanceMode::dog, 2.0, &net, nullptr}, x, 1, 0), InvalidInput);
    EXPECT_THROW((void)guided_eps({GuidanceMode::cfg, 2.0, nullptr, &net}, x, 1, 0), InvalidInput);
    EXPECT_THROW((void)guided_eps({GuidanceMode::cfg, std::nan(""), &net, &net}, x, 1, 0), InvalidInput);
    EXPECT_NO_THROW((void)guided_eps({GuidanceMode::none, 2.0, &net, nullptr}, x, 1, 0));
    const MlpDenoiser other(net.params(), linear_schedule(500));
    EXPECT_THROW((void)guided_eps({GuidanceMode::dog, 2.0, &net, &other}, x, 1, 0), InvalidInput);
    EXPECT_THROW(guidance_mode_from_string("pag"), InvalidInput);
}

TEST(Prop1, ResidualVanishesOnGrid) {
    const auto w = small_world();
    const WorldOracles o(w, sched());
    const PointSet g = grid_points(7, -3, 3);
    double worst = 0;
    for (int t : {1, 50, 500, 1000})
        for (double gw : {1.0, 2.0, 5.0})
            for (Eigen::Index i = 0; i < g.rows(); ++i) {
                const Vec r = prop1_residual(w, o, g.row(i).transpose(), t, 0, gw);
                worst = std::max(worst, r.cwiseAbs().maxCoeff());
                if (gw == 1.0) {
                    EXPECT_EQ(r.cwiseAbs().maxCoeff(), 0.0);
                }
            }
    EXPECT_LT(worst, 1e-9);
}

TEST(Prop1, TargetEqualsSourceHasNoPosteriorTerm) {
    const auto base = small_world();
    const DomainWorld w(base.source(), {0, 1, 2, 3}, {0, 1, 0, 1});
    ASSERT_TRUE(w.target_is_source());
    const Vec x = vec2(1, 1);
    EXPECT_EQ(domain_posterior_log_grad(w, x, 0.3), Vec::Zero(2));
    EXPECT_LT(prop1_residual(w, sched(), x, 200, 1, 3.0).norm(), 1e-12);
}

TEST(Prop1, OffsetFaultIsDetected) {
    const auto w = small_world();
    const WorldOracles o(w, sched());
    const Vec r = prop1_residual(w, o, vec2(0.5, 0.5), 100, 0, 2.0, 0.1);
    EXPECT_NEAR(r.cwiseAbs().maxCoeff(), 0.1, 1e-9);
}

TEST(DensityRatio, ZeroAtUnitWeightAndNegativeOutsideTarget) {
    const auto w = small_world();
    const Vec in = vec2(-1, 0), out = vec2(4, 4);
    EXPECT_EQ(density_ratio_check(w, sched(), out, in, 1, 1.0).gap, 0.0);
    const double g2 = density_ratio_check(w, sched(), out, in, 1, 2.0).gap;
    EXPECT_LT(g2, -5.0);
    double prev = 0;
    for (double gw : {1.5, 2.0, 3.0, 6.0}) {
        const double g = density_ratio_check(w, sched(), out, in, 1, gw).gap;
        EXPECT_LT(g, prev);
        prev = g;
    }
}

TEST(GuidanceField, CorrectionsAreScoreDifferences) {
    const auto w = small_world();
    const WorldOracles o(w, sched());
    const PointSet g = grid_points(5, -4, 4);
    const int t = 400;
    const double abar = sched().abar(t);
    const auto f = guidance_field(o.cfg(2.0), o.dog(2.0), g, t, 0);
    ASSERT_EQ(f.size(), 25u);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
        const Vec x = g.row(i).transpose();
        const Vec sc = score(noised_marginal(w.class_conditional(0), abar), x);
        const Vec st = score(noised_marginal(w.target(), abar), x);
        const Vec ss = score(noised_marginal(w.source(), abar), x);
        const auto k = static_cast<std::size_t>(i);
        EXPECT_LT((f[k].cfg - (sc - st)).norm(), 1e-9 * std::max(1.0, sc.norm()));
        EXPECT_LT((f[k].dog - (sc - ss)).norm(), 1e-9 * std::max(1.0, sc.norm()));
        // The two corrections differ by exactly the posterior gradient.
        EXPECT_LT((f[k].dog - f[k].cfg - domain_posterior_log_grad(w, x, abar)).norm(), 1e-9);
    }
    const auto none = guidance_field({GuidanceMode::none, 2.0, &o.target, nullptr}, o.dog(1.0), g, t, 0);
    for (const auto& v : none) {
        EXPECT_EQ(v.cfg, Vec::Zero(2));
        EXPECT_EQ(v.dog.norm(), 0.0);
    }
}

TEST(GuidanceField, DogPointsTowardTargetAtTargetModes) {
    // One target mode per class, each with a non-target neighbour.
    std::vector<GaussianComponent> comps;
    comps.emplace_back(vec2(0, 0), 0.25 * Mat::Identity(2, 2), 1.0);
    comps.emplace_back(vec2(12, 0), 0.25 * Mat::Identity(2, 2), 1.0);
    comps.emplace_back(vec2(2.5, 0), 0.25 * Mat::Identity(2, 2), 1.0);
    comps.emplace_back(vec2(12, 2.5), 0.25 * Mat::Identity(2, 2), 1.0);
    const DomainWorld w(GaussianMixture::normalized(std::move(comps)), {0, 1}, {0, 1});
    const WorldOracles o(w, sched());
    for (int t : {50, 300}) {
        const double abar = sched().abar(t);
        const auto noised_target = noised_marginal(w.target(), abar);
        for (std::size_t k = 0; k < 2; ++k) {
            // Noised mode center, nudged toward the neighbouring non-target mode.
            const Vec toward = (w.source()[k + 2].mean() - w.source()[k].mean()).normalized();
            PointSet g = (std::sqrt(abar) * w.source()[k].mean() + 0.3 * toward).transpose();
            const auto f = guidance_field(o.cfg(2.0), o.dog(2.0), g, t, w.class_of_target_mode(k));
            EXPECT_GT(f[0].dog.dot(score(noised_target, g.row(0).transpose())), 0.0) << "t " << t << " mode " << k;
        }
    }
    const auto unit = guidance_field(o.cfg(1.0), o.dog(1.0), grid_points(3, -1, 1), 300, 0);
    for (const auto& v : unit) EXPECT_EQ(v.cfg.norm() + v.dog.norm(), 0.0);
}
