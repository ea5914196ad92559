// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dog/checkpoint.hpp"
#include "dog/denoiser.hpp"
#include "dog/error.hpp"
#include "dog/guidance.hpp"
#include "dog/hash.hpp"
#include "dog/lab/config.hpp"
#include "dog/metrics.hpp"
#include "dog/mlp.hpp"
#include "dog/sampler.hpp"
#include "dog/train.hpp"
#include "dog/world.hpp"

namespace dog::lab {

namespace fs = std::filesystem;

/// A pipeline stage threw; the manifest records the diagnostics.
class StageFailure : public Error {
  public:
    StageFailure(std::string stage, const std::string& what)
        : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
    [[nodiscard]] const std::string& stage() const noexcept { return stage_; }

  private:
    std::string stage_;
};

enum class Stage { world, pretrain, finetune, guide, sample, evaluate, field };

inline constexpr std::array<Stage, 7> all_stages{Stage::world,  Stage::pretrain, Stage::finetune, Stage::guide,
                                                 Stage::sample, Stage::evaluate, Stage::field};

inline std::string_view to_string(Stage s) {
    switch (s) {
        case Stage::world: return "world";
        case Stage::pretrain: return "pretrain";
        case Stage::finetune: return "finetune";
        case Stage::guide: return "guide";
        case Stage::sample: return "sample";
        case Stage::evaluate: return "evaluate";
        case Stage::field: return "field";
    }
    return "?";
}

//---------------------------------------------------------------------------//
// Files
//---------------------------------------------------------------------------//

inline std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("cannot open " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& p, std::string_view content) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot open " + p.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error("failed writing " + p.string());
}

inline std::string file_hash(const fs::path& p) { return hex64(fnv1a(read_file(p))); }

inline std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Exclusive ownership of an output directory for the lifetime of the object.
class DirectoryLock {
  public:
    explicit DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
        fs::create_directories(dir);
        std::FILE* f = std::fopen(path_.c_str(), "wx");
        if (!f)
            throw Error("output directory " + dir.string() + " is locked by another run (remove " + path_.string() +
                        " if no run is active)");
        std::fprintf(f, "locked %s\n", utc_now().c_str());
        std::fclose(f);
    }
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;
    ~DirectoryLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }

  private:
    fs::path path_;
};

//---------------------------------------------------------------------------//
// Manifest
//---------------------------------------------------------------------------//

struct Artifact {
    std::string path;  ///< relative to the run directory
    std::string hash;  ///< FNV-1a of the file content
};

struct StageRecord {
    bool done = false;
    std::map<std::string, Artifact> artifacts;
    std::string completed_at;
    std::string error;
};

/*!
 * Per-seed record of a pipeline run. Stage records and artifact hashes are
 * persisted in `manifest.json` inside the run directory; the counters are
 * for the current invocation only.
 */
struct RunManifest {
    fs::path dir;
    std::string fingerprint;
    std::uint64_t seed = 0;
    nlohmann::json config;
    std::map<std::string, StageRecord> stages;
    std::size_t train_steps_executed = 0;
    std::size_t stages_skipped = 0;

    [[nodiscard]] bool done(Stage s) const {
        auto it = stages.find(std::string(to_string(s)));
        return it != stages.end() && it->second.done;
    }

    [[nodiscard]] fs::path artifact(Stage s, const std::string& name) const {
        auto it = stages.find(std::string(to_string(s)));
        if (it == stages.end() || !it->second.done)
            throw Error(dir.string() + ": stage '" + std::string(to_string(s)) + "' has not completed");
        auto a = it->second.artifacts.find(name);
        if (a == it->second.artifacts.end())
            throw Error(dir.string() + ": stage '" + std::string(to_string(s)) + "' has no artifact " + name);
        return dir / a->second.path;
    }

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json st = nlohmann::json::object();
        for (const auto& [name, rec] : stages) {
            nlohmann::json arts = nlohmann::json::object();
            for (const auto& [k, a] : rec.artifacts) arts[k] = {{"path", a.path}, {"fnv1a", a.hash}};
            nlohmann::json r = {{"done", rec.done}, {"artifacts", arts}, {"completed_at", rec.completed_at}};
            if (!rec.error.empty()) r["error"] = rec.error;
            st[name] = r;
        }
        return {{"fingerprint", fingerprint}, {"seed", seed}, {"config", config}, {"stages", st}};
    }

    static RunManifest from_json(const nlohmann::json& j, fs::path dir) {
        RunManifest m;
        m.dir = std::move(dir);
        m.fingerprint = j.at("fingerprint").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.config = j.at("config");
        for (const auto& [name, r] : j.at("stages").items()) {
            StageRecord rec;
            rec.done = r.at("done").get<bool>();
            rec.completed_at = r.value("completed_at", "");
            rec.error = r.value("error", "");
            for (const auto& [k, a] : r.at("artifacts").items())
                rec.artifacts[k] = {a.at("path").get<std::string>(), a.at("fnv1a").get<std::string>()};
            m.stages[name] = std::move(rec);
        }
        return m;
    }

    void save() const { write_file(dir / "manifest.json", to_json().dump(2) + "\n"); }

    [[nodiscard]] ExperimentConfig resolved_config() const { return config_from_json(config); }

    /// True iff the stage completed and every artifact still matches its hash.
    [[nodiscard]] bool intact(Stage s) const {
        auto it = stages.find(std::string(to_string(s)));
        if (it == stages.end() || !it->second.done) return false;
        for (const auto& [k, a] : it->second.artifacts) {
            const fs::path p = dir / a.path;
            if (!fs::exists(p) || file_hash(p) != a.hash) return false;
        }
        return true;
    }
};

inline RunManifest load_manifest(const fs::path& dir) {
    const fs::path p = dir / "manifest.json";
    try {
        return RunManifest::from_json(nlohmann::json::parse(read_file(p)), dir);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(p.string() + ": " + e.what());
    }
}

inline fs::path run_dir(const ExperimentConfig& cfg, std::uint64_t seed) {
    return fs::path(cfg.output_dir) / ("seed_" + std::to_string(seed));
}

//---------------------------------------------------------------------------//
// Variants
//---------------------------------------------------------------------------//

struct Variant {
    std::string name;  ///< "none", "cfg_w2", "dog_w2", ...
    GuidanceMode mode = GuidanceMode::none;
    double w = 1.0;
};

inline std::string weight_tag(double w) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", w);
    return buf;
}

inline std::vector<Variant> variants(const ExperimentConfig& cfg) {
    std::vector<Variant> v{{"none", GuidanceMode::none, 1.0}};
    for (double w : cfg.w) {
        v.push_back({"cfg_w" + weight_tag(w), GuidanceMode::cfg, w});
        v.push_back({"dog_w" + weight_tag(w), GuidanceMode::dog, w});
    }
    return v;
}

//---------------------------------------------------------------------------//
// Pipeline
//---------------------------------------------------------------------------//

namespace detail {

inline void write_losses(const fs::path& p, const std::vector<double>& losses) {
    std::ostringstream s;
    s << "step,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < losses.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, losses[i]);
        s << buf;
    }
    write_file(p, s.str());
}

inline PointSet read_points_csv(const fs::path& p, std::vector<ClassId>* labels = nullptr) {
    std::istringstream in(read_file(p));
    std::string line;
    std::getline(in, line);
    std::vector<std::array<double, 2>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string chain, cls, a, b;
        std::getline(ls, chain, ',');
        std::getline(ls, cls, ',');
        std::getline(ls, a, ',');
        std::getline(ls, b, ',');
        rows.push_back({std::stod(a), std::stod(b)});
        if (labels) labels->push_back(cls == "null" ? null_class : ClassId(std::stoi(cls)));
    }
    PointSet out(static_cast<Eigen::Index>(rows.size()), 2);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out(static_cast<Eigen::Index>(i), 0) = rows[i][0];
        out(static_cast<Eigen::Index>(i), 1) = rows[i][1];
    }
    return out;
}

/// Class-balanced draw of n points from the target class conditionals.
inline PointSet target_reference(const DomainWorld& world, std::size_t n, std::uint64_t seed,
                                 std::vector<ClassId>* labels = nullptr) {
    const auto per = n / static_cast<std::size_t>(world.class_count());
    PointSet out(static_cast<Eigen::Index>(per * static_cast<std::size_t>(world.class_count())), world.source().dim());
    for (int c = 0; c < world.class_count(); ++c) {
        Stream rng(seed, static_cast<std::uint64_t>(c));
        out.middleRows(static_cast<Eigen::Index>(per * static_cast<std::size_t>(c)), static_cast<Eigen::Index>(per)) =
            sample(world.class_conditional(c), per, rng);
        if (labels) labels->insert(labels->end(), per, ClassId(c));
    }
    return out;
}

/// Grid over the target region widened by `margin` on every side.
inline PointSet field_grid(const ExperimentConfig& cfg) {
    const auto& L = cfg.world.layout;
    const double lo = L.target_center - L.target_half_width - cfg.figure2.grid_margin;
    const double hi = L.target_center + L.target_half_width + cfg.figure2.grid_margin;
    return square_grid(cfg.figure2.grid_n, lo, hi);
}

inline int field_timestep(const ExperimentConfig& cfg) {
    const auto ts = timestep_subsequence(cfg.schedule.T, cfg.sampler.steps);
    const auto k = static_cast<std::size_t>(std::lround(cfg.figure2.field_fraction * static_cast<double>(ts.size() - 1)));
    return ts[k];
}

}  // namespace detail

/// Loaded models of one run; the CFG pair depends on the configured guide style.
struct RunModels {
    NoiseSchedule schedule;
    std::unique_ptr<MlpDenoiser> pretrained;
    std::unique_ptr<MlpDenoiser> conditional;
    std::unique_ptr<MlpDenoiser> cfg_conditional;  ///< joint style only
    std::unique_ptr<MlpDenoiser> cfg_guide;        ///< separate style only

    [[nodiscard]] const Denoiser& cfg_cond() const { return cfg_conditional ? *cfg_conditional : *conditional; }
    [[nodiscard]] const Denoiser& cfg_uncond() const { return cfg_guide ? *cfg_guide : *cfg_conditional; }

    [[nodiscard]] GuidanceSpec spec(const Variant& v, const Denoiser* dog_conditional = nullptr) const {
        switch (v.mode) {
            case GuidanceMode::none: return {GuidanceMode::none, 1.0, conditional.get(), nullptr};
            case GuidanceMode::cfg: return {GuidanceMode::cfg, v.w, &cfg_cond(), &cfg_uncond()};
            case GuidanceMode::dog:
                return {GuidanceMode::dog, v.w, dog_conditional ? dog_conditional : conditional.get(),
                        pretrained.get()};
        }
        throw InvalidInput("unknown guidance mode");
    }
};

inline RunModels load_models(const RunManifest& m, const ExperimentConfig& cfg) {
    RunModels r{cfg.schedule.build(), nullptr, nullptr, nullptr, nullptr};
    const MlpArch arch = cfg.arch();
    auto load = [&](Stage s, const char* name) {
        auto ck = load_checkpoint(m.artifact(s, name).string(), arch);
        if (ck.schedule_fingerprint != r.schedule.fingerprint())
            throw FormatError(std::string(name) + ": checkpoint trained against schedule " + ck.schedule_fingerprint);
        return std::make_unique<MlpDenoiser>(std::move(ck.params), r.schedule);
    };
    r.pretrained = load(Stage::pretrain, "theta0");
    r.conditional = load(Stage::finetune, "conditional");
    if (cfg.cfg_guide.style == CfgGuideStyle::separate)
        r.cfg_guide = load(Stage::guide, "cfg_guide");
    else
        r.cfg_conditional = load(Stage::guide, "cfg_joint");
    return r;
}

/*!
 * Runs stages of one seed up to and including `until`, skipping stages whose
 * manifest record and artifacts are intact. A stage that is rerun invalidates
 * every later stage. Failures are recorded in the manifest and rethrown as
 * StageFailure.
 */
inline RunManifest run_pipeline(const ExperimentConfig& cfg, std::uint64_t seed, Stage until = Stage::field) {
    cfg.validate();
    const fs::path dir = run_dir(cfg, seed);
    fs::create_directories(dir);
    const std::string fp = config_fingerprint(cfg);

    RunManifest m;
    if (fs::exists(dir / "manifest.json")) {
        m = load_manifest(dir);
        if (m.fingerprint != fp || m.seed != seed)
            throw ConfigError(dir.string() + " holds a run of a different config (fingerprint " + m.fingerprint +
                              ", this config " + fp + ")");
    }
    m.dir = dir;
    m.fingerprint = fp;
    m.seed = seed;
    m.config = to_json(cfg);
    m.config["seeds"] = nlohmann::json::array({seed});

    const NoiseSchedule schedule = cfg.schedule.build();
    const MlpArch arch = cfg.arch();

    auto save_ckpt = [&](const MlpParams& p, std::uint64_t s, const std::string& file) {
        save_checkpoint({p, schedule.fingerprint(), s}, (dir / file).string());
    };
    auto load_params = [&](Stage s, const char* name) {
        return load_checkpoint(m.artifact(s, name).string(), arch).params;
    };
    auto target_data = [&](const DomainWorld& world, bool labelled) -> std::unique_ptr<DataSource> {
        if (cfg.target_data_size == 0) {
            if (labelled) return std::make_unique<MixtureData>(world.target(), target_mode_labels(world));
            return std::make_unique<MixtureData>(world.target());
        }
        Stream rng(derive_seed(seed, "target-data"));
        auto s = sample_labeled(world.target(), cfg.target_data_size, rng);
        std::vector<ClassId> labels;
        for (auto k : s.component) labels.push_back(labelled ? ClassId(world.class_of_target_mode(k)) : null_class);
        return std::make_unique<FiniteData>(std::move(s.points), std::move(labels));
    };
    auto train_stage = [&](const MlpParams& init, const DataSource& data, const StageTrainConfig& sc,
                           double dropout, const char* tag) {
        TrainConfig tc = sc.resolve(derive_seed(seed, tag));
        tc.label_dropout = dropout;
        auto res = train(init, schedule, data, tc);
        m.train_steps_executed += tc.steps;
        return std::make_pair(std::move(res), tc.seed);
    };

    using Artifacts = std::map<std::string, Artifact>;
    auto artifact = [&](const std::string& file) { return Artifact{file, file_hash(dir / file)}; };

    std::map<Stage, std::function<Artifacts()>> body;
    body[Stage::world] = [&] {
        const DomainWorld world = build_world(cfg.world.seed, cfg.world.n_source, cfg.world.n_target,
                                              static_cast<Eigen::Index>(cfg.world.dim), cfg.world.layout);
        save_world(world, (dir / "world.json").string());
        return Artifacts{{"world", artifact("world.json")}};
    };
    body[Stage::pretrain] = [&] {
        const DomainWorld world = load_world(m.artifact(Stage::world, "world").string());
        MixtureData src(world.source());
        auto [res, s] = train_stage(init_params(arch, derive_seed(seed, "init")), src, cfg.pretrain,
                                    cfg.pretrain.label_dropout, "pretrain");
        save_ckpt(res.params, s, "theta0.ckpt");
        detail::write_losses(dir / "pretrain_loss.csv", res.losses);
        return Artifacts{{"theta0", artifact("theta0.ckpt")}, {"loss", artifact("pretrain_loss.csv")}};
    };
    body[Stage::finetune] = [&] {
        const DomainWorld world = load_world(m.artifact(Stage::world, "world").string());
        const auto data = target_data(world, true);
        auto [res, s] = train_stage(load_params(Stage::pretrain, "theta0"), *data, cfg.finetune,
                                    cfg.finetune.label_dropout, "finetune");
        save_ckpt(res.params, s, "conditional.ckpt");
        detail::write_losses(dir / "finetune_loss.csv", res.losses);
        return Artifacts{{"conditional", artifact("conditional.ckpt")}, {"loss", artifact("finetune_loss.csv")}};
    };
    body[Stage::guide] = [&] {
        const DomainWorld world = load_world(m.artifact(Stage::world, "world").string());
        if (cfg.cfg_guide.style == CfgGuideStyle::separate) {
            const auto data = target_data(world, false);
            const MlpParams init = cfg.cfg_guide.init_from_pretrained ? load_params(Stage::pretrain, "theta0")
                                                                      : init_params(arch, derive_seed(seed, "guide-init"));
            auto [res, s] = train_stage(init, *data, cfg.finetune, 1.0, "cfg-guide");
            save_ckpt(res.params, s, "cfg_guide.ckpt");
            detail::write_losses(dir / "cfg_guide_loss.csv", res.losses);
            return Artifacts{{"cfg_guide", artifact("cfg_guide.ckpt")}, {"loss", artifact("cfg_guide_loss.csv")}};
        }
        const auto data = target_data(world, true);
        auto [res, s] = train_stage(load_params(Stage::pretrain, "theta0"), *data, cfg.finetune,
                                    cfg.cfg_guide.joint_dropout, "cfg-joint");
        save_ckpt(res.params, s, "cfg_joint.ckpt");
        detail::write_losses(dir / "cfg_joint_loss.csv", res.losses);
        return Artifacts{{"cfg_joint", artifact("cfg_joint.ckpt")}, {"loss", artifact("cfg_joint_loss.csv")}};
    };
    body[Stage::sample] = [&] {
        const RunModels models = load_models(m, cfg);
        Artifacts out;
        const std::size_t per = cfg.sampler.n / 2;
        const std::size_t keep = std::min(per, cfg.figure2.trajectory_chains / 2);
        std::size_t dog_null = 0, dog_cond = 0;
        for (const Variant& v : variants(cfg)) {
            CountingDenoiser counted(*models.conditional);
            const GuidanceSpec spec = models.spec(v, &counted);
            PointSet all(static_cast<Eigen::Index>(2 * per), 2);
            std::vector<ClassId> labels;
            std::vector<Trajectory> kept;
            for (int c = 0; c < 2; ++c) {
                SampleRequest req;
                req.steps = cfg.sampler.steps;
                req.n = per;
                req.c = c;
                req.seed = derive_seed(seed, "sample");
                req.first_chain = static_cast<std::size_t>(c) * per;
                req.record = keep > 0;
                SampleResult r = sample(spec, req);
                all.middleRows(static_cast<Eigen::Index>(req.first_chain), static_cast<Eigen::Index>(per)) = r.samples;
                labels.insert(labels.end(), per, ClassId(c));
                for (std::size_t i = 0; i < keep; ++i) kept.push_back(std::move(r.trajectories[i]));
            }
            if (v.mode == GuidanceMode::dog) {
                dog_null += counted.null_evaluations();
                dog_cond += counted.conditional_evaluations();
            }
            const std::string sf = "samples_" + v.name + ".csv", tf = "trajectories_" + v.name + ".csv";
            write_samples_csv((dir / sf).string(), all, labels);
            write_trajectories_csv((dir / tf).string(), kept);
            out["samples_" + v.name] = artifact(sf);
            out["trajectories_" + v.name] = artifact(tf);
        }
        if (dog_null != 0)
            throw NumericalError("DoG sampling evaluated the fine-tuned model with the NULL class " +
                                 std::to_string(dog_null) + " times");
        const nlohmann::json inst = {{"dog_conditional_null_evaluations", dog_null},
                                     {"dog_conditional_class_evaluations", dog_cond}};
        write_file(dir / "instrumentation.json", inst.dump(2) + "\n");
        out["instrumentation"] = artifact("instrumentation.json");
        return out;
    };
    body[Stage::evaluate] = [&] {
        const DomainWorld world = load_world(m.artifact(Stage::world, "world").string());
        std::vector<ClassId> ref_labels;
        const PointSet ref = detail::target_reference(world, cfg.metrics.reference_n, derive_seed(seed, "reference"),
                                                      &ref_labels);
        write_samples_csv((dir / "reference.csv").string(), ref, ref_labels);
        const EvaluationParams ep{cfg.metrics.radius_sigmas, cfg.metrics.knn_k};
        nlohmann::json report = {{"fingerprint", fp}, {"seed", seed}, {"variants", nlohmann::json::object()}};
        std::ostringstream txt;
        char buf[256];
        std::snprintf(buf, sizeof buf, "%-10s %10s %12s %10s %10s %12s\n", "variant", "frechet2", "in_domain", "precision",
                      "recall", "target_ll");
        txt << "seed " << seed << "  config " << fp << "\n" << buf;
        for (const Variant& v : variants(cfg)) {
            const PointSet s = detail::read_points_csv(m.artifact(Stage::sample, "samples_" + v.name));
            MetricsReport r = evaluate(s, ref, world, ep);
            r.config_fingerprint = fp;
            report["variants"][v.name] = r.to_json();
            std::snprintf(buf, sizeof buf, "%-10s %10.5f %12.5f %10.5f %10.5f %12.5f\n", v.name.c_str(), r.frechet2,
                          r.in_domain_rate, r.precision, r.recall, r.mean_target_loglik);
            txt << buf;
        }
        report["instrumentation"] = nlohmann::json::parse(read_file(m.artifact(Stage::sample, "instrumentation")));
        write_file(dir / "report.json", report.dump(2) + "\n");
        write_file(dir / "report.txt", txt.str());
        return Artifacts{{"reference", artifact("reference.csv")},
                         {"report", artifact("report.json")},
                         {"report_text", artifact("report.txt")}};
    };
    body[Stage::field] = [&] {
        const RunModels models = load_models(m, cfg);
        const Variant cfg_v{"cfg", GuidanceMode::cfg, cfg.w.front()};
        const Variant dog_v{"dog", GuidanceMode::dog, cfg.w.front()};
        const PointSet grid = detail::field_grid(cfg);
        const int t = detail::field_timestep(cfg);
        const auto field = guidance_field(models.spec(cfg_v), models.spec(dog_v), grid, t, cfg.figure2.field_class);
        std::ostringstream s;
        s << "timestep,x0,x1,cfg_g0,cfg_g1,dog_g0,dog_g1\n";
        char buf[256];
        for (Eigen::Index i = 0; i < grid.rows(); ++i) {
            const auto& f = field[static_cast<std::size_t>(i)];
            std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", t, grid(i, 0), grid(i, 1),
                          f.cfg[0], f.cfg[1], f.dog[0], f.dog[1]);
            s << buf;
        }
        write_file(dir / "field.csv", s.str());
        return Artifacts{{"field", artifact("field.csv")}};
    };

    bool rerun = false;
    for (Stage st : all_stages) {
        const std::string name(to_string(st));
        if (!rerun && m.intact(st)) {
            ++m.stages_skipped;
        } else {
            rerun = true;
            for (Stage later : all_stages)
                if (static_cast<int>(later) >= static_cast<int>(st)) m.stages.erase(std::string(to_string(later)));
            StageRecord rec;
            try {
                rec.artifacts = body.at(st)();
            } catch (const std::exception& e) {
                rec.error = e.what();
                m.stages[name] = rec;
                m.save();
                throw StageFailure(name, e.what());
            }
            rec.done = true;
            rec.completed_at = utc_now();
            m.stages[name] = std::move(rec);
            m.save();
        }
        if (st == until) break;
    }
    return m;
}

/// Every seed of the config in order, under one directory lock.
inline std::vector<RunManifest> run_all(const ExperimentConfig& cfg, Stage until = Stage::field) {
    cfg.validate();
    DirectoryLock lock(cfg.output_dir);
    std::vector<RunManifest> out;
    for (auto s : cfg.seeds) out.push_back(run_pipeline(cfg, s, until));
    return out;
}

//---------------------------------------------------------------------------//
// Four-panel plot data
//---------------------------------------------------------------------------//

struct Figure2Files {
    fs::path world;  ///< (a) kind,index,class,weight,x0,x1,sigma
    fs::path cfg;    ///< (b) chain,class,x0,x1
    fs::path dog;    ///< (c) chain,class,x0,x1
    fs::path field;  ///< (d) timestep,x0,x1,cfg_g0,cfg_g1,dog_g0,dog_g1
};

/*!
 * Writes the four panels of the figure into `<run>/figure2`. Panel (a) lists
 * every source mode (kind "source") and target mode (kind "target", with its
 * class) followed by the real target samples (kind "data"). Panels (b) and
 * (c) use the first guidance weight of the config.
 */
inline Figure2Files emit_figure2_data(const RunManifest& m) {
    const ExperimentConfig cfg = m.resolved_config();
    for (const Variant& v : variants(cfg))
        if (!m.done(Stage::sample) || !fs::exists(m.artifact(Stage::sample, "trajectories_" + v.name)))
            throw Error(m.dir.string() + ": missing trajectories for " + v.name + "; run the sample stage first");
    if (!m.done(Stage::field)) throw Error(m.dir.string() + ": guidance field not computed; run the field stage first");
    const fs::path out = m.dir / "figure2";
    fs::create_directories(out);
    Figure2Files f{out / "panel_a_world.csv", out / "panel_b_cfg.csv", out / "panel_c_dog.csv",
                   out / "panel_d_field.csv"};

    const DomainWorld world = load_world(m.artifact(Stage::world, "world").string());
    std::vector<int> cls(world.source().size(), -1);
    for (std::size_t k = 0; k < world.target_indices().size(); ++k)
        cls[world.target_indices()[k]] = world.class_of_target_mode(k);
    std::ostringstream a;
    a << "kind,index,class,weight,x0,x1,sigma\n";
    char buf[256];
    for (std::size_t i = 0; i < world.source().size(); ++i) {
        const auto& c = world.source()[i];
        std::snprintf(buf, sizeof buf, "%s,%zu,%d,%.17g,%.17g,%.17g,%.17g\n", cls[i] < 0 ? "source" : "target", i,
                      cls[i], c.weight(), c.mean()[0], c.mean()[1], std::sqrt(c.cov()(0, 0)));
        a << buf;
    }
    std::vector<ClassId> labels;
    const PointSet ref = detail::read_points_csv(m.artifact(Stage::evaluate, "reference"), &labels);
    for (Eigen::Index i = 0; i < ref.rows(); ++i) {
        std::snprintf(buf, sizeof buf, "data,%td,%d,,%.17g,%.17g,\n", static_cast<std::ptrdiff_t>(i),
                      labels[static_cast<std::size_t>(i)].value_or(-1), ref(i, 0), ref(i, 1));
        a << buf;
    }
    write_file(f.world, a.str());
    const std::string w = weight_tag(cfg.w.front());
    fs::copy_file(m.artifact(Stage::sample, "samples_cfg_w" + w), f.cfg, fs::copy_options::overwrite_existing);
    fs::copy_file(m.artifact(Stage::sample, "samples_dog_w" + w), f.dog, fs::copy_options::overwrite_existing);
    fs::copy_file(m.artifact(Stage::field, "field"), f.field, fs::copy_options::overwrite_existing);
    return f;
}

//---------------------------------------------------------------------------//
// Cross-seed summary
//---------------------------------------------------------------------------//

inline constexpr std::array<const char*, 5> metric_names{"frechet2", "in_domain_rate", "precision", "recall",
                                                         "mean_target_loglik"};

/// Whether a larger value of the metric is better.
inline bool higher_is_better(std::string_view metric) { return metric != "frechet2"; }

struct MetricSummary {
    double mean = 0.0;
    double std = 0.0;  ///< sample standard deviation, 0 for a single seed
};

struct SeedComparison {
    std::uint64_t seed = 0;
    double dog = 0.0;
    double cfg = 0.0;
    bool dog_wins = false;
};

struct SeedSummary {
    std::string fingerprint;
    std::vector<std::uint64_t> seeds;
    std::map<std::string, std::map<std::string, MetricSummary>> variants;  ///< variant -> metric -> summary
    /// weight tag -> metric -> per-seed DoG vs CFG comparison
    std::map<std::string, std::map<std::string, std::vector<SeedComparison>>> comparisons;

    [[nodiscard]] std::size_t wins(const std::string& w, const std::string& metric) const {
        std::size_t n = 0;
        for (const auto& c : comparisons.at(w).at(metric)) n += c.dog_wins;
        return n;
    }

    /// Seeds on which DoG beats CFG on every listed metric.
    [[nodiscard]] std::size_t joint_wins(const std::string& w, const std::vector<std::string>& metrics) const {
        std::size_t n = 0;
        for (std::size_t i = 0; i < seeds.size(); ++i) {
            bool all = true;
            for (const auto& mname : metrics) all = all && comparisons.at(w).at(mname)[i].dog_wins;
            n += all;
        }
        return n;
    }

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json v = nlohmann::json::object(), c = nlohmann::json::object();
        for (const auto& [name, ms] : variants)
            for (const auto& [metric, s] : ms) v[name][metric] = {{"mean", s.mean}, {"std", s.std}};
        for (const auto& [w, ms] : comparisons)
            for (const auto& [metric, list] : ms) {
                nlohmann::json rows = nlohmann::json::array();
                for (const auto& r : list)
                    rows.push_back({{"seed", r.seed}, {"dog", r.dog}, {"cfg", r.cfg}, {"dog_wins", r.dog_wins}});
                c[w][metric] = {{"per_seed", rows}, {"dog_wins", wins(w, metric)}, {"cfg_wins", list.size() - wins(w, metric)}};
            }
        return {{"fingerprint", fingerprint}, {"seeds", seeds}, {"variants", v}, {"dog_vs_cfg", c}};
    }

    [[nodiscard]] std::string text() const {
        std::ostringstream s;
        char buf[256];
        s << "config " << fingerprint << ", " << seeds.size() << " seed(s)\n\n";
        std::snprintf(buf, sizeof buf, "%-10s", "variant");
        s << buf;
        for (const char* mname : metric_names) {
            std::snprintf(buf, sizeof buf, " %24s", mname);
            s << buf;
        }
        s << "\n";
        for (const auto& [name, ms] : variants) {
            std::snprintf(buf, sizeof buf, "%-10s", name.c_str());
            s << buf;
            for (const char* mname : metric_names) {
                const auto& x = ms.at(mname);
                std::snprintf(buf, sizeof buf, " %12.5f +- %9.5f", x.mean, x.std);
                s << buf;
            }
            s << "\n";
        }
        for (const auto& [w, ms] : comparisons) {
            s << "\nDoG vs CFG at w=" << w << " (DoG wins / seeds)\n";
            for (const char* mname : metric_names) {
                std::snprintf(buf, sizeof buf, "  %-20s %zu/%zu  ", mname, wins(w, mname), seeds.size());
                s << buf;
                for (const auto& r : ms.at(mname)) s << (r.dog_wins ? 'W' : 'L');
                s << "\n";
            }
        }
        return s.str();
    }
};

/*!
 * Mean, standard deviation and per-seed DoG vs CFG outcome of each metric.
 * Running (Welford) moments keep the mean exact and the deviation exactly
 * zero when all seeds agree.
 */
inline SeedSummary aggregate_seeds(const std::vector<RunManifest>& manifests) {
    dog::detail::require(!manifests.empty(), "aggregate_seeds: need at least one manifest");
    SeedSummary out;
    out.fingerprint = manifests.front().fingerprint;
    std::vector<nlohmann::json> reports;
    for (const auto& m : manifests)
        if (m.fingerprint != out.fingerprint)
            throw ConfigError("aggregate_seeds: manifests come from different configs (" + out.fingerprint + " vs " +
                              m.fingerprint + ")");
    for (const auto& m : manifests) {
        reports.push_back(nlohmann::json::parse(read_file(m.artifact(Stage::evaluate, "report"))));
        out.seeds.push_back(m.seed);
    }
    const ExperimentConfig cfg = manifests.front().resolved_config();
    for (const Variant& v : variants(cfg))
        for (const char* mname : metric_names) {
            double mean = 0.0, m2 = 0.0;
            for (std::size_t i = 0; i < reports.size(); ++i) {
                const double x = reports[i].at("variants").at(v.name).at(mname).get<double>();
                const double delta = x - mean;
                mean += delta / static_cast<double>(i + 1);
                m2 += delta * (x - mean);
            }
            const double var = reports.size() > 1 ? m2 / static_cast<double>(reports.size() - 1) : 0.0;
            out.variants[v.name][mname] = {mean, std::sqrt(std::max(0.0, var))};
        }
    for (double w : cfg.w) {
        const std::string tag = weight_tag(w);
        for (const char* mname : metric_names)
            for (std::size_t i = 0; i < reports.size(); ++i) {
                const auto& vs = reports[i].at("variants");
                const double d = vs.at("dog_w" + tag).at(mname).get<double>();
                const double c = vs.at("cfg_w" + tag).at(mname).get<double>();
                const bool win = higher_is_better(mname) ? d > c : d < c;
                out.comparisons[tag][mname].push_back({out.seeds[i], d, c, win});
            }
    }
    return out;
}

/// Writes summary.json and summary.txt into the config's output directory.
inline void write_summary(const ExperimentConfig& cfg, const SeedSummary& s) {
    fs::create_directories(cfg.output_dir);
    write_file(fs::path(cfg.output_dir) / "summary.json", s.to_json().dump(2) + "\n");
    write_file(fs::path(cfg.output_dir) / "summary.txt", s.text());
}

}  // namespace dog::lab
