// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dog/lab/pipeline.hpp"
#include "test_util.hpp"

using namespace dog;
using namespace dog::lab;
namespace fs = std::filesystem;

namespace {

class LabTest : public ::testing::Test {
  protected:
    void SetUp() override {
        root_ = fs::path(::testing::TempDir()) /
                ("dog_lab_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(root_);
        fs::create_directories(root_);
    }
    void TearDown() override { fs::remove_all(root_); }

    /// Seconds-scale configuration exercising every stage.
    [[nodiscard]] ExperimentConfig tiny(const std::string& sub, std::size_t steps = 20) const {
        ExperimentConfig c;
        c.world.n_source = 12;
        c.world.n_target = 3;
        c.model.hidden = 16;
        c.model.time_dim = 8;
        c.pretrain.steps = steps;
        c.pretrain.batch_size = 32;
        c.finetune.steps = steps / 2;
        c.finetune.batch_size = 32;
        c.sampler.n = 40;
        c.sampler.steps = 10;
        c.metrics.reference_n = 40;
        c.figure2.grid_n = 4;
        c.figure2.trajectory_chains = 6;
        c.seeds = {1, 2};
        c.output_dir = (root_ / sub).string();
        return c;
    }

    fs::path root_;
};

std::size_t line_count(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string l; std::getline(in, l);) ++n;
    return n;
}

std::string first_line(const fs::path& p) {
    std::ifstream in(p);
    std::string l;
    std::getline(in, l);
    return l;
}

}  // namespace

TEST(LabConfig, JsonRoundTrip) {
    ExperimentConfig c;
    c.w = {1.5, 3};
    c.seeds = {7};
    c.cfg_guide.style = CfgGuideStyle::joint;
    c.model.parameterization = Parameterization::score;
    c.world.layout.sigma_max = 0.7;
    const auto back = config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    EXPECT_EQ(config_fingerprint(back), config_fingerprint(c));
}

TEST(LabConfig, FingerprintIgnoresSeedsAndOutput) {
    ExperimentConfig a, b;
    b.seeds = {9};
    b.output_dir = "elsewhere";
    EXPECT_EQ(config_fingerprint(a), config_fingerprint(b));
    b.finetune.steps = 999;
    EXPECT_NE(config_fingerprint(a), config_fingerprint(b));
}

TEST(LabConfig, RejectsUnknownKeysAndBadValues) {
    auto j = to_json(ExperimentConfig{});
    j["sampler"]["stepz"] = 3;
    EXPECT_THROW(config_from_json(j), ConfigError);
    j = to_json(ExperimentConfig{});
    j["unknown"] = 1;
    EXPECT_THROW(config_from_json(j), ConfigError);
    j = to_json(ExperimentConfig{});
    j["sampler"]["steps"] = "twenty";
    EXPECT_THROW(config_from_json(j), ConfigError);
    j = to_json(ExperimentConfig{});
    j["sampler"]["steps"] = 2000;
    EXPECT_THROW(config_from_json(j), ConfigError);
    j = to_json(ExperimentConfig{});
    j["seeds"] = {1, 1};
    EXPECT_THROW(config_from_json(j), ConfigError);
    EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(LabConfig, DefaultsMatchStudySetup) {
    const ExperimentConfig c;
    EXPECT_EQ(c.world.n_source, 100u);
    EXPECT_EQ(c.world.n_target, 5u);
    EXPECT_EQ(c.pretrain.steps, 10000u);
    EXPECT_EQ(c.pretrain.batch_size, 128u);
    EXPECT_EQ(c.pretrain.learning_rate, 1e-3);
    EXPECT_EQ(c.finetune.steps, 1000u);
    EXPECT_EQ(c.sampler.steps, 20);
    EXPECT_EQ(c.w, std::vector<double>{2.0});
    EXPECT_EQ(c.seeds.size(), 5u);
    EXPECT_EQ(c.model.hidden, 64);
    EXPECT_NE(derive_seed(1, "pretrain"), derive_seed(1, "finetune"));
    EXPECT_NE(derive_seed(1, "pretrain"), derive_seed(2, "pretrain"));
}

TEST_F(LabTest, ZeroStepSmokeRunCompletes) {
    auto c = tiny("smoke", 0);
    c.seeds = {1};
    const auto ms = run_all(c);
    ASSERT_EQ(ms.size(), 1u);
    for (Stage s : all_stages) EXPECT_TRUE(ms[0].done(s)) << to_string(s);
    EXPECT_EQ(ms[0].train_steps_executed, 0u);
    const auto report = nlohmann::json::parse(read_file(ms[0].artifact(Stage::evaluate, "report")));
    for (const char* v : {"none", "cfg_w2", "dog_w2"})
        for (const char* mname : metric_names) EXPECT_TRUE(report["variants"][v].contains(mname));
    EXPECT_EQ(report["instrumentation"]["dog_conditional_null_evaluations"], 0);
    EXPECT_FALSE(fs::exists(fs::path(c.output_dir) / ".lock"));
}

TEST_F(LabTest, RerunSkipsCompletedStages) {
    const auto c = tiny("rerun");
    const auto first = run_pipeline(c, 1);
    EXPECT_EQ(first.train_steps_executed, 20u + 10 + 10);
    const auto second = run_pipeline(c, 1);
    EXPECT_EQ(second.train_steps_executed, 0u);
    EXPECT_EQ(second.stages_skipped, all_stages.size());

    // Damaging one artifact reruns that stage and everything after it.
    fs::remove(second.artifact(Stage::guide, "cfg_guide"));
    const auto third = run_pipeline(c, 1);
    EXPECT_EQ(third.train_steps_executed, 10u);
    EXPECT_EQ(third.stages_skipped, 3u);
}

TEST_F(LabTest, StopsAtRequestedStage) {
    const auto c = tiny("until");
    const auto m = run_pipeline(c, 1, Stage::finetune);
    EXPECT_TRUE(m.done(Stage::finetune));
    EXPECT_FALSE(m.done(Stage::guide));
    EXPECT_THROW((void)m.artifact(Stage::sample, "samples_none"), Error);
}

TEST_F(LabTest, RerunsAreByteIdentical) {
    const auto a = run_pipeline(tiny("a"), 2);
    const auto b = run_pipeline(tiny("b"), 2);
    for (const auto& [stage, rec] : a.stages) {
        ASSERT_TRUE(b.stages.count(stage));
        for (const auto& [name, art] : rec.artifacts) {
            EXPECT_EQ(art.hash, b.stages.at(stage).artifacts.at(name).hash) << stage << "/" << name;
            EXPECT_EQ(read_file(a.dir / art.path), read_file(b.dir / art.path)) << stage << "/" << name;
        }
    }
    const auto other = run_pipeline(tiny("c"), 3);
    EXPECT_NE(other.stages.at("pretrain").artifacts.at("theta0").hash,
              a.stages.at("pretrain").artifacts.at("theta0").hash);
}

TEST_F(LabTest, JointGuideStyleRuns) {
    auto c = tiny("joint");
    c.cfg_guide.style = CfgGuideStyle::joint;
    const auto m = run_pipeline(c, 1);
    EXPECT_TRUE(fs::exists(m.artifact(Stage::guide, "cfg_joint")));
    EXPECT_TRUE(m.done(Stage::field));
}

TEST_F(LabTest, Figure2Files) {
    const auto c = tiny("fig");
    const auto m = run_pipeline(c, 1);
    const auto f = emit_figure2_data(m);
    EXPECT_EQ(first_line(f.world), "kind,index,class,weight,x0,x1,sigma");
    EXPECT_EQ(line_count(f.world), 1u + 12 + 40);
    EXPECT_EQ(first_line(f.cfg), "chain,class,x0,x1");
    EXPECT_EQ(line_count(f.cfg), 1u + 40);
    EXPECT_EQ(line_count(f.dog), 1u + 40);
    EXPECT_EQ(first_line(f.field), "timestep,x0,x1,cfg_g0,cfg_g1,dog_g0,dog_g1");
    EXPECT_EQ(line_count(f.field), 1u + 16);
    const auto traj = m.artifact(Stage::sample, "trajectories_dog_w2");
    EXPECT_EQ(first_line(traj), "chain,step,timestep,x0,x1");
    EXPECT_EQ(line_count(traj), 1u + 6 * 11);

    const auto partial = run_pipeline(tiny("fig_partial"), 1, Stage::evaluate);
    EXPECT_THROW(emit_figure2_data(partial), Error);
}

TEST_F(LabTest, AggregateSeeds) {
    const auto c = tiny("agg");
    const auto ms = run_all(c);
    const auto s = aggregate_seeds(ms);
    EXPECT_EQ(s.seeds, (std::vector<std::uint64_t>{1, 2}));
    for (const char* mname : metric_names) EXPECT_EQ(s.comparisons.at("2").at(mname).size(), 2u);
    write_summary(c, s);
    EXPECT_TRUE(fs::exists(fs::path(c.output_dir) / "summary.json"));
    EXPECT_NE(read_file(fs::path(c.output_dir) / "summary.txt").find("DoG vs CFG at w=2"), std::string::npos);

    const auto single = aggregate_seeds({ms[0]});
    for (const auto& [v, mm] : single.variants)
        for (const auto& [mname, x] : mm) EXPECT_EQ(x.std, 0.0);

    const auto dup = aggregate_seeds({ms[1], ms[1], ms[1]});
    for (const auto& [v, mm] : dup.variants)
        for (const auto& [mname, x] : mm) {
            EXPECT_EQ(x.std, 0.0);
            EXPECT_EQ(x.mean, single.variants.size() ? aggregate_seeds({ms[1]}).variants.at(v).at(mname).mean : 0.0);
        }
}

TEST_F(LabTest, FiveSeedsGiveFiveEntries) {
    auto c = tiny("five", 0);
    c.seeds = {1, 2, 3, 4, 5};
    const auto s = aggregate_seeds(run_all(c, Stage::evaluate));
    for (const char* mname : metric_names) {
        EXPECT_EQ(s.comparisons.at("2").at(mname).size(), 5u);
        EXPECT_LE(s.wins("2", mname), 5u);
    }
    EXPECT_LE(s.joint_wins("2", {"in_domain_rate", "frechet2"}), 5u);
}

TEST_F(LabTest, MismatchedConfigsAreRejected) {
    auto a = tiny("mm");
    const auto ma = run_pipeline(a, 1, Stage::world);
    auto b = a;
    b.finetune.steps = 3;
    EXPECT_THROW(run_pipeline(b, 1), ConfigError);
    auto other = tiny("mm_other");
    other.finetune.steps = 3;
    const auto mb = run_pipeline(other, 1, Stage::world);
    EXPECT_THROW(aggregate_seeds({ma, mb}), ConfigError);
}

TEST_F(LabTest, LockPreventsConcurrentRuns) {
    const auto c = tiny("lock");
    {
        DirectoryLock held(c.output_dir);
        EXPECT_THROW(run_all(c), Error);
        EXPECT_THROW(DirectoryLock{c.output_dir}, Error);
    }
    EXPECT_NO_THROW(DirectoryLock{c.output_dir});
}

TEST_F(LabTest, StageFailureIsRecorded) {
    auto c = tiny("fail");
    c.pretrain.learning_rate = 1e300;
    c.pretrain.steps = 50;
    // Adam steps of size ~1e300 overflow the forward pass on the second step.
    try {
        (void)run_pipeline(c, 1);
        FAIL() << "expected StageFailure";
    } catch (const StageFailure& e) {
        EXPECT_EQ(e.stage(), "pretrain");
        EXPECT_NE(std::string(e.what()).find("non-finite loss"), std::string::npos) << e.what();
    }
    const auto m = load_manifest(run_dir(c, 1));
    EXPECT_TRUE(m.done(Stage::world));
    EXPECT_FALSE(m.done(Stage::pretrain));
    EXPECT_FALSE(m.stages.at("pretrain").error.empty());
}
