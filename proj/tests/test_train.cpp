// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dog/train.hpp"
#include "test_util.hpp"

using namespace dog;
using namespace testutil;

namespace {

MlpParams random_params(const MlpArch& arch, Stream& r) {
    MlpParams p(arch);
    for (std::size_t b = 0; b < MlpParams::block_count; ++b) {
        Mat& m = p.block(b);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.uniform(-0.6, 0.6);
    }
    return p;
}

/// Exact eps for data concentrated on a single point.
class PointMassEps final : public Denoiser {
  public:
    PointMassEps(Vec p, NoiseSchedule s) : p_(std::move(p)), s_(std::move(s)) {}
    [[nodiscard]] Eigen::Index dim() const override { return p_.size(); }
    [[nodiscard]] const NoiseSchedule& schedule() const override { return s_; }
    [[nodiscard]] int class_count() const override { return 2; }
    [[nodiscard]] PointSet eps_batch(const PointSet& x, int t, ClassId c) const override {
        check_inputs(x, t, c);
        const double a = s_.abar(t);
        return (x.rowwise() - std::sqrt(a) * p_.transpose()) / std::sqrt(1 - a);
    }

  private:
    Vec p_;
    NoiseSchedule s_;
};

class NanAfter final : public DataSource {
  public:
    explicit NanAfter(std::size_t k) : k_(k) {}
    [[nodiscard]] Batch draw(std::size_t n, Stream& rng) const override {
        Batch b{PointSet(static_cast<Eigen::Index>(n), 2), std::vector<ClassId>(n, 0)};
        for (Eigen::Index i = 0; i < b.x0.size(); ++i) b.x0.data()[i] = rng.normal();
        if (calls_++ == k_) b.x0(0, 0) = std::nan("");
        return b;
    }

  private:
    std::size_t k_;
    mutable std::size_t calls_ = 0;
};

Batch labelled_batch(std::size_t n, std::uint64_t seed) {
    Stream r(seed);
    const auto w = small_world();
    return MixtureData(w.target(), target_mode_labels(w)).draw(n, r);
}

double window_mean(const std::vector<double>& v, std::size_t end, std::size_t len) {
    return std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(end - len),
                           v.begin() + static_cast<std::ptrdiff_t>(end), 0.0) /
           static_cast<double>(len);
}

}  // namespace

TEST(Gradients, MatchFiniteDifferencesOnEveryBlock) {
    const auto s = linear_schedule();
    for (std::uint64_t trial = 0; trial < 10; ++trial) {
        Stream r(100 + trial);
        MlpArch arch;
        arch.hidden = 4 + static_cast<int>(r.below(8));
        arch.time_dim = 2 * (1 + static_cast<int>(r.below(4)));
        arch.parameterization = trial % 2 ? Parameterization::score : Parameterization::epsilon;
        const MlpParams p = random_params(arch, r);
        const Mat table = time_embedding_table(s.T(), arch.time_dim);
        Stream nr(200 + trial);
        const NoisedBatch nb = draw_noised_batch(labelled_batch(6, trial), s, nr, 0.3);
        const auto [value, grad] = loss_and_gradients_on(p, table, s, nb);
        const double h = 1e-4;
        for (std::size_t b = 0; b < MlpParams::block_count; ++b) {
            Mat fd(p.block(b).rows(), p.block(b).cols());
            for (Eigen::Index i = 0; i < fd.size(); ++i) {
                MlpParams up = p, dn = p;
                up.block(b).data()[i] += h;
                dn.block(b).data()[i] -= h;
                fd.data()[i] = (loss_and_gradients_on(up, table, s, nb).loss -
                                loss_and_gradients_on(dn, table, s, nb).loss) / (2 * h);
            }
            const double rel = (fd - grad.block(b)).norm() / std::max(grad.block(b).norm(), 1e-6);
            EXPECT_LT(rel, 1e-4) << "trial " << trial << " block " << MlpParams::names[b];
        }
        EXPECT_NEAR(value, loss_on(MlpDenoiser(p, s), nb), 1e-12 * std::max(1.0, value));
    }
}

TEST(Loss, ExactPredictorGivesZero) {
    const auto s = linear_schedule();
    const Vec p = vec2(1.5, -2);
    PointSet pts = p.transpose();
    const FiniteData data(pts, {ClassId{0}});
    Stream r(1);
    const Batch b = data.draw(1000, r);
    EXPECT_LT(loss(PointMassEps(p, s), b, s, r, 0.0), 1e-20);
}

TEST(Loss, ZeroModelGivesDimension) {
    const auto s = linear_schedule();
    const MlpDenoiser zero(init_params(MlpArch{}, 1), s);
    Stream r(2);
    const Batch b = labelled_batch(20000, 3);
    // ||eps||^2 is chi-square with 2 dof: variance 4.
    EXPECT_NEAR(loss(zero, b, s, r, 0.1), 2.0, 3 * 2.0 / std::sqrt(20000.0));
}

TEST(Loss, FullDropoutTrainsNullOnly) {
    const auto s = linear_schedule();
    Stream r(4);
    const NoisedBatch nb = draw_noised_batch(labelled_batch(500, 5), s, r, 1.0);
    EXPECT_EQ(nb.null_count, 500u);
    for (const auto& c : nb.cond) EXPECT_FALSE(c.has_value());
    const MlpArch arch;
    const Mat table = time_embedding_table(s.T(), arch.time_dim);
    Stream pr(6);
    const auto g = loss_and_gradients_on(random_params(arch, pr), table, s, nb).grad;
    const Mat& ct = g[MlpParams::class_table];
    EXPECT_EQ(ct.topRows(2).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_GT(ct.row(2).norm(), 0.0);
}

TEST(Loss, DropoutRateIsBinomial) {
    const auto s = linear_schedule();
    Stream r(7);
    const NoisedBatch nb = draw_noised_batch(labelled_batch(100000, 8), s, r, 0.1);
    const double sd = std::sqrt(1e5 * 0.1 * 0.9);
    EXPECT_NEAR(static_cast<double>(nb.null_count), 1e4, 3 * sd);
}

TEST(Loss, TimestepsAreUniformAndInRange) {
    const auto s = linear_schedule(10, 0.01, 0.1);
    Stream r(9);
    const NoisedBatch nb = draw_noised_batch(labelled_batch(50000, 10), s, r, 0.0);
    std::vector<int> count(11, 0);
    for (int t : nb.t) {
        ASSERT_GE(t, 1);
        ASSERT_LE(t, 10);
        ++count[static_cast<std::size_t>(t)];
    }
    const double sd = std::sqrt(50000 * 0.1 * 0.9);
    for (int t = 1; t <= 10; ++t) EXPECT_NEAR(count[static_cast<std::size_t>(t)], 5000, 4 * sd);
}

TEST(Train, ZeroStepsLeavesParametersUnchanged) {
    const auto s = linear_schedule();
    const auto w = small_world();
    const MlpParams p = init_params(MlpArch{}, 11);
    TrainConfig cfg;
    cfg.steps = 0;
    const auto res = train(p, s, MixtureData(w.target(), target_mode_labels(w)), cfg);
    EXPECT_EQ(res.params, p);
    EXPECT_TRUE(res.losses.empty());
}

TEST(Train, DeterministicForFixedSeed) {
    const auto s = linear_schedule();
    const auto w = small_world();
    const MixtureData data(w.target(), target_mode_labels(w));
    TrainConfig cfg;
    cfg.steps = 30;
    cfg.seed = 12;
    cfg.label_dropout = 0.2;
    MlpArch arch;
    arch.hidden = 16;
    const auto a = train(init_params(arch, 1), s, data, cfg);
    const auto b = train(init_params(arch, 1), s, data, cfg);
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(a.losses, b.losses);
    cfg.seed = 13;
    EXPECT_FALSE(train(init_params(arch, 1), s, data, cfg).params == a.params);
}

TEST(Train, LossDecaysTowardBayesFloor) {
    const auto s = linear_schedule();
    const auto w = build_world(1, 100, 5, 2);
    const MixtureData data(w.source());
    TrainConfig cfg;
    cfg.steps = 10000;
    cfg.seed = 14;
    cfg.label_dropout = 1.0;
    const auto res = train(init_params(MlpArch{}, 2), s, data, cfg);
    ASSERT_EQ(res.losses.size(), 10000u);
    EXPECT_EQ(res.null_examples, res.total_examples);

    // Loss of the exact source denoiser: no model can average below it.
    Stream r(15);
    const Batch b = data.draw(20000, r);
    const double floor = loss(OracleDenoiser(w.source(), s), b, s, r, 1.0);
    const double first = window_mean(res.losses, 100, 100), last = window_mean(res.losses, 10000, 100);
    EXPECT_LT(last, first);
    EXPECT_LT(window_mean(res.losses, 10000, 500), window_mean(res.losses, 1000, 500));
    EXPECT_LT(window_mean(res.losses, 10000, 500), 1.15 * floor);
    // Halving the initial window mean would need a loss below the floor.
    EXPECT_GT(floor, 0.5 * first);
}

TEST(Train, NonFiniteLossNamesStep) {
    const auto s = linear_schedule();
    TrainConfig cfg;
    cfg.steps = 10;
    cfg.batch_size = 4;
    try {
        (void)train(init_params(MlpArch{}, 1), s, NanAfter(3), cfg);
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("at step 3"), std::string::npos) << e.what();
    }
}

TEST(Train, RejectsBadConfig) {
    const auto s = linear_schedule();
    const auto w = small_world();
    const MixtureData data(w.source(), {});
    TrainConfig cfg;
    cfg.learning_rate = 0;
    EXPECT_THROW(train(init_params(MlpArch{}, 1), s, data, cfg), InvalidInput);
    cfg = {};
    cfg.label_dropout = 1.5;
    EXPECT_THROW(train(init_params(MlpArch{}, 1), s, data, cfg), InvalidInput);
    cfg = {};
    cfg.batch_size = 0;
    EXPECT_THROW(train(init_params(MlpArch{}, 1), s, data, cfg), InvalidInput);
}
