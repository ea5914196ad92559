// SPDX-License-Identifier: Apache-2.0
// doglab: command-line front end of the DoG vs CFG toy laboratory.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dog/lab/config.hpp"
#include "dog/lab/pipeline.hpp"
#include "dog/verify.hpp"

namespace {

using namespace dog;
using namespace dog::lab;

constexpr int exit_ok = 0;
constexpr int exit_failure = 1;
constexpr int exit_config = 2;
constexpr int exit_inconclusive = 3;

struct Common {
    std::string config_path;
    std::vector<std::uint64_t> seeds;
    std::string output_dir;

    [[nodiscard]] ExperimentConfig resolve() const {
        ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
        if (!seeds.empty()) cfg.seeds = seeds;
        if (!output_dir.empty()) cfg.output_dir = output_dir;
        cfg.validate();
        return cfg;
    }
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config_path, "experiment config (JSON); defaults apply when omitted");
    app->add_option("--seed", c.seeds, "run seed(s), replacing the config's seed list");
    app->add_option("--output", c.output_dir, "output directory, replacing the config's output_dir");
}

int emit(const VerificationResult& r, const std::string& json_out) {
    const std::string text = r.to_json().dump(2);
    std::cout << text << "\n";
    if (!json_out.empty()) write_file(json_out, text + "\n");
    switch (r.status) {
        case VerifyStatus::pass: return exit_ok;
        case VerifyStatus::fail: return exit_failure;
        case VerifyStatus::inconclusive: return exit_inconclusive;
    }
    return exit_failure;
}

DomainWorld config_world(const ExperimentConfig& cfg) {
    return build_world(cfg.world.seed, cfg.world.n_source, cfg.world.n_target,
                       static_cast<Eigen::Index>(cfg.world.dim), cfg.world.layout);
}

void print_reports(const std::vector<RunManifest>& ms) {
    for (const auto& m : ms) std::cout << read_file(m.artifact(Stage::evaluate, "report_text")) << "\n";
}

SeedSummary report(const ExperimentConfig& cfg) {
    std::vector<RunManifest> ms;
    for (auto s : cfg.seeds) ms.push_back(load_manifest(run_dir(cfg, s)));
    SeedSummary sum = aggregate_seeds(ms);
    write_summary(cfg, sum);
    std::cout << sum.text();
    return sum;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"doglab: domain guidance vs classifier-free guidance on a 2D Gaussian-mixture transfer task"};
    app.require_subcommand(1);
    Common common;

    auto* c_config = app.add_subcommand("config", "print the resolved experiment config");
    auto* c_world = app.add_subcommand("world", "build and save the mixture world");
    auto* c_train = app.add_subcommand("train", "pre-train, fine-tune and train the CFG guide");
    auto* c_sample = app.add_subcommand("sample", "draw samples for every guidance variant");
    auto* c_eval = app.add_subcommand("eval", "evaluate samples and compute the guidance field");
    auto* c_report = app.add_subcommand("report", "aggregate evaluated seeds into a summary table");
    auto* c_run = app.add_subcommand("run", "run every stage, then report and emit figure data");
    auto* c_fig = app.add_subcommand("figure2", "write the four figure panels for each seed");
    bool fig_run = false;
    c_fig->add_flag("--run", fig_run, "run missing pipeline stages first");
    for (auto* sc : {c_config, c_world, c_train, c_sample, c_eval, c_report, c_run, c_fig}) add_common(sc, common);

    auto* c_verify = app.add_subcommand("verify", "run a verification suite");
    c_verify->require_subcommand(1);
    std::string json_out;
    auto* v_prop1 = c_verify->add_subcommand("prop1", "DoG = CFG + (w-1) domain classifier guidance, exact oracles");
    Prop1Config p1;
    v_prop1->add_option("--threshold", p1.threshold, "sup-norm residual threshold");
    v_prop1->add_option("--posterior-offset", p1.posterior_offset, "fault injection offset on the posterior gradient");
    v_prop1->add_option("--w", p1.w, "guidance weights");
    v_prop1->add_option("--timesteps", p1.timesteps, "timesteps");
    auto* v_thm1 = c_verify->add_subcommand("thm1", "finite-dataset marginal error bound 1/sqrt(N)");
    Theorem1Config t1;
    v_thm1->add_option("--N", t1.N, "dataset sizes");
    v_thm1->add_option("--M", t1.M, "dataset draws per size");
    v_thm1->add_option("--abar", t1.abar, "noise level abar_t");
    v_thm1->add_option("--bound-scale", t1.bound_scale, "fault injection factor on the bound");
    auto* v_deg = c_verify->add_subcommand("degeneracies", "w = 1, w = 0 and guide = conditional reductions");
    DegeneracyConfig dg;
    v_deg->add_option("--n", dg.n, "chains per check");
    v_deg->add_option("--w-one", dg.w_one, "weight used for the w = 1 reduction (fault injection)");
    v_deg->add_option("--w-zero", dg.w_zero, "weight used for the w = 0 reduction (fault injection)");
    auto* v_ratio = c_verify->add_subcommand("density-ratio", "DoG vs CFG density ratio far outside the target");
    DensityRatioConfig dr;
    v_ratio->add_option("--w", dr.w, "guidance weight");
    for (auto* sc : {v_prop1, v_thm1, v_deg, v_ratio}) {
        add_common(sc, common);
        sc->add_option("--json-out", json_out, "also write the result record to this file");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_config;
    }

    try {
        const ExperimentConfig cfg = common.resolve();
        if (c_config->parsed()) {
            std::cout << to_json(cfg).dump(2) << "\n";
        } else if (c_world->parsed()) {
            for (const auto& m : run_all(cfg, Stage::world)) std::cout << m.artifact(Stage::world, "world").string() << "\n";
        } else if (c_train->parsed()) {
            for (const auto& m : run_all(cfg, Stage::guide))
                std::cout << m.dir.string() << ": " << m.train_steps_executed << " training steps\n";
        } else if (c_sample->parsed()) {
            run_all(cfg, Stage::sample);
        } else if (c_eval->parsed()) {
            print_reports(run_all(cfg, Stage::field));
        } else if (c_report->parsed()) {
            report(cfg);
        } else if (c_run->parsed()) {
            const auto ms = run_all(cfg);
            print_reports(ms);
            for (const auto& m : ms) emit_figure2_data(m);
            report(cfg);
        } else if (c_fig->parsed()) {
            std::vector<RunManifest> ms;
            if (fig_run)
                ms = run_all(cfg);
            else
                for (auto s : cfg.seeds) ms.push_back(load_manifest(run_dir(cfg, s)));
            for (const auto& m : ms) {
                const Figure2Files f = emit_figure2_data(m);
                std::cout << f.world.string() << "\n" << f.cfg.string() << "\n" << f.dog.string() << "\n"
                          << f.field.string() << "\n";
            }
        } else if (v_prop1->parsed()) {
            return emit(verify_proposition1(config_world(cfg), cfg.schedule.build(), p1), json_out);
        } else if (v_thm1->parsed()) {
            t1.seed = cfg.seeds.front();
            return emit(verify_theorem1(standard_normal(), t1).result, json_out);
        } else if (v_deg->parsed()) {
            const auto ms = run_all(cfg, Stage::guide);
            const ExperimentConfig one = ms.front().resolved_config();
            const RunModels models = load_models(ms.front(), one);
            dg.steps = cfg.sampler.steps;
            dg.seed = cfg.seeds.front();
            return emit(verify_degeneracies({models.conditional.get(), models.pretrained.get(), &models.cfg_uncond()}, dg),
                        json_out);
        } else if (v_ratio->parsed()) {
            return emit(verify_density_ratio(config_world(cfg), cfg.schedule.build(), dr), json_out);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return exit_config;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_failure;
    }
    return exit_ok;
}
