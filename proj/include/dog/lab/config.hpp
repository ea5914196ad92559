// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dog/error.hpp"
#include "dog/hash.hpp"
#include "dog/metrics.hpp"
#include "dog/mlp.hpp"
#include "dog/rng.hpp"
#include "dog/schedule.hpp"
#include "dog/train.hpp"
#include "dog/world.hpp"

namespace dog::lab {

/// Raised for malformed or inconsistent experiment configs.
class ConfigError : public InvalidInput {
  public:
    using InvalidInput::InvalidInput;
};

/// How the CFG variant gets its unconditional branch.
enum class CfgGuideStyle {
    separate,  ///< a second model fine-tuned on the target with the NULL class only
    joint,     ///< one conditional model fine-tuned with label dropout, its NULL path is the guide
};

inline std::string_view to_string(CfgGuideStyle s) { return s == CfgGuideStyle::joint ? "joint" : "separate"; }

inline CfgGuideStyle cfg_guide_style_from_string(std::string_view s) {
    if (s == "separate") return CfgGuideStyle::separate;
    if (s == "joint") return CfgGuideStyle::joint;
    throw ConfigError("unknown cfg_guide.style '" + std::string(s) + "' (expected separate or joint)");
}

struct WorldConfig {
    std::uint64_t seed = 1;
    std::size_t n_source = 100;
    std::size_t n_target = 5;
    int dim = 2;
    LayoutParams layout;
};

struct ScheduleConfig {
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    [[nodiscard]] NoiseSchedule build() const { return linear_schedule(T, beta_start, beta_end); }
};

struct ModelConfig {
    int hidden = 64;
    int time_dim = 64;
    Parameterization parameterization = Parameterization::epsilon;
};

/// Training hyperparameters of one stage; the stage seed is derived from the run seed.
struct StageTrainConfig {
    std::size_t steps = 1000;
    std::size_t batch_size = 128;
    double learning_rate = 1e-3;
    double label_dropout = 0.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    [[nodiscard]] TrainConfig resolve(std::uint64_t seed) const {
        TrainConfig c;
        c.steps = steps;
        c.batch_size = batch_size;
        c.learning_rate = learning_rate;
        c.label_dropout = label_dropout;
        c.adam_beta1 = adam_beta1;
        c.adam_beta2 = adam_beta2;
        c.adam_eps = adam_eps;
        c.seed = seed;
        return c;
    }
};

struct CfgGuideConfig {
    CfgGuideStyle style = CfgGuideStyle::separate;
    double joint_dropout = 0.1;       ///< label dropout of the joint style
    bool init_from_pretrained = true; ///< separate style: start from theta0 (false: fresh init)
};

struct SamplerConfig {
    int steps = 20;
    std::size_t n = 2000;  ///< per variant, split equally over the classes
};

struct MetricsConfig {
    double radius_sigmas = 3.0;
    std::size_t knn_k = 3;
    std::size_t reference_n = 2000;  ///< target reference samples, split equally over the classes
};

struct Figure2Config {
    int grid_n = 20;            ///< field grid is grid_n x grid_n over the target region plus margin
    double grid_margin = 2.0;
    int field_class = 0;
    double field_fraction = 0.5;         ///< field timestep: this fraction into the sampling trajectory
    std::size_t trajectory_chains = 100; ///< recorded chains per variant
};

struct ExperimentConfig {
    WorldConfig world;
    ScheduleConfig schedule;
    ModelConfig model;
    StageTrainConfig pretrain{10000, 128, 1e-3, 1.0};
    StageTrainConfig finetune{1000, 128, 1e-3, 0.0};
    CfgGuideConfig cfg_guide;
    std::size_t target_data_size = 0;  ///< 0: fresh draws from p_t every batch; else a fixed dataset of this size
    SamplerConfig sampler;
    std::vector<double> w{2.0};
    MetricsConfig metrics;
    Figure2Config figure2;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::string output_dir = "runs/default";

    [[nodiscard]] MlpArch arch() const {
        MlpArch a;
        a.dim = world.dim;
        a.hidden = model.hidden;
        a.time_dim = model.time_dim;
        a.class_count = 2;
        a.parameterization = model.parameterization;
        return a;
    }

    void validate() const {
        auto need = [](bool ok, const std::string& msg) {
            if (!ok) throw ConfigError("config: " + msg);
        };
        need(world.n_target >= 2 && world.n_target < world.n_source, "world needs 2 <= n_target < n_source");
        need(world.dim == 2, "world.dim must be 2");
        need(schedule.T >= 1, "schedule.T must be positive");
        need(schedule.beta_start > 0.0 && schedule.beta_end < 1.0 && schedule.beta_start <= schedule.beta_end,
             "schedule betas must satisfy 0 < beta_start <= beta_end < 1");
        need(model.hidden >= 1 && model.time_dim >= 2 && model.time_dim % 2 == 0,
             "model.hidden must be positive and model.time_dim even");
        for (const auto* s : {&pretrain, &finetune}) {
            need(s->batch_size >= 1, "batch_size must be positive");
            need(s->learning_rate > 0.0, "learning_rate must be positive");
            need(s->label_dropout >= 0.0 && s->label_dropout <= 1.0, "label_dropout must lie in [0, 1]");
        }
        need(cfg_guide.joint_dropout > 0.0 && cfg_guide.joint_dropout < 1.0,
             "cfg_guide.joint_dropout must lie in (0, 1)");
        need(sampler.steps >= 1 && sampler.steps <= schedule.T, "sampler.steps must lie in [1, T]");
        need(sampler.n >= 2 && sampler.n % 2 == 0, "sampler.n must be even and at least 2");
        need(!w.empty(), "w list must be nonempty");
        for (double v : w) need(std::isfinite(v), "w values must be finite");
        need(metrics.radius_sigmas > 0.0, "metrics.radius_sigmas must be positive");
        need(metrics.reference_n % 2 == 0 && metrics.reference_n > metrics.knn_k,
             "metrics.reference_n must be even and exceed knn_k");
        need(sampler.n > metrics.knn_k, "sampler.n must exceed metrics.knn_k");
        need(figure2.grid_n >= 1, "figure2.grid_n must be positive");
        need(figure2.field_class >= 0 && figure2.field_class < 2, "figure2.field_class must be 0 or 1");
        need(figure2.field_fraction >= 0.0 && figure2.field_fraction <= 1.0, "figure2.field_fraction in [0, 1]");
        need(!seeds.empty(), "seed list must be nonempty");
        need(std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() == seeds.size(), "seeds must be distinct");
        need(!output_dir.empty(), "output_dir must be set");
    }
};

//---------------------------------------------------------------------------//
// JSON
//---------------------------------------------------------------------------//

namespace detail {

using nlohmann::json;

/// Reads `key` into `out` if present; rejects keys not listed in `allowed`.
class Reader {
  public:
    Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(where_ + "." + key + ": " + e.what());
        }
    }

    [[nodiscard]] const json* child(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.contains(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
    }

  private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

inline json to_json(const StageTrainConfig& s) {
    return {{"steps", s.steps},           {"batch_size", s.batch_size}, {"learning_rate", s.learning_rate},
            {"label_dropout", s.label_dropout}, {"adam_beta1", s.adam_beta1}, {"adam_beta2", s.adam_beta2},
            {"adam_eps", s.adam_eps}};
}

inline void read(const json& j, const std::string& where, StageTrainConfig& s) {
    Reader r(j, where);
    r.get("steps", s.steps);
    r.get("batch_size", s.batch_size);
    r.get("learning_rate", s.learning_rate);
    r.get("label_dropout", s.label_dropout);
    r.get("adam_beta1", s.adam_beta1);
    r.get("adam_beta2", s.adam_beta2);
    r.get("adam_eps", s.adam_eps);
    r.finish();
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
    using nlohmann::json;
    const auto& L = c.world.layout;
    return {
        {"world",
         {{"seed", c.world.seed},
          {"n_source", c.world.n_source},
          {"n_target", c.world.n_target},
          {"dim", c.world.dim},
          {"layout",
           {{"box_half_width", L.box_half_width},
            {"target_center", L.target_center},
            {"target_half_width", L.target_half_width},
            {"exclusion_margin", L.exclusion_margin},
            {"sigma_min", L.sigma_min},
            {"sigma_max", L.sigma_max}}}}},
        {"schedule", {{"T", c.schedule.T}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}}},
        {"model",
         {{"hidden", c.model.hidden},
          {"time_dim", c.model.time_dim},
          {"parameterization", to_string(c.model.parameterization)}}},
        {"pretrain", detail::to_json(c.pretrain)},
        {"finetune", detail::to_json(c.finetune)},
        {"cfg_guide",
         {{"style", to_string(c.cfg_guide.style)},
          {"joint_dropout", c.cfg_guide.joint_dropout},
          {"init_from_pretrained", c.cfg_guide.init_from_pretrained}}},
        {"target_data_size", c.target_data_size},
        {"sampler", {{"steps", c.sampler.steps}, {"n", c.sampler.n}}},
        {"w", c.w},
        {"metrics",
         {{"radius_sigmas", c.metrics.radius_sigmas},
          {"knn_k", c.metrics.knn_k},
          {"reference_n", c.metrics.reference_n}}},
        {"figure2",
         {{"grid_n", c.figure2.grid_n},
          {"grid_margin", c.figure2.grid_margin},
          {"field_class", c.figure2.field_class},
          {"field_fraction", c.figure2.field_fraction},
          {"trajectory_chains", c.figure2.trajectory_chains}}},
        {"seeds", c.seeds},
        {"output_dir", c.output_dir},
    };
}

/// Missing keys keep their defaults; unknown keys and bad values raise ConfigError.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    detail::Reader top(j, "config");
    if (const auto* w = top.child("world")) {
        detail::Reader r(*w, "world");
        r.get("seed", c.world.seed);
        r.get("n_source", c.world.n_source);
        r.get("n_target", c.world.n_target);
        r.get("dim", c.world.dim);
        if (const auto* l = r.child("layout")) {
            detail::Reader lr(*l, "world.layout");
            auto& L = c.world.layout;
            lr.get("box_half_width", L.box_half_width);
            lr.get("target_center", L.target_center);
            lr.get("target_half_width", L.target_half_width);
            lr.get("exclusion_margin", L.exclusion_margin);
            lr.get("sigma_min", L.sigma_min);
            lr.get("sigma_max", L.sigma_max);
            lr.finish();
        }
        r.finish();
    }
    if (const auto* s = top.child("schedule")) {
        detail::Reader r(*s, "schedule");
        r.get("T", c.schedule.T);
        r.get("beta_start", c.schedule.beta_start);
        r.get("beta_end", c.schedule.beta_end);
        r.finish();
    }
    if (const auto* m = top.child("model")) {
        detail::Reader r(*m, "model");
        r.get("hidden", c.model.hidden);
        r.get("time_dim", c.model.time_dim);
        std::string p(to_string(c.model.parameterization));
        r.get("parameterization", p);
        try {
            c.model.parameterization = parameterization_from_string(p);
        } catch (const InvalidInput& e) {
            throw ConfigError(std::string("model.parameterization: ") + e.what());
        }
        r.finish();
    }
    if (const auto* p = top.child("pretrain")) detail::read(*p, "pretrain", c.pretrain);
    if (const auto* p = top.child("finetune")) detail::read(*p, "finetune", c.finetune);
    if (const auto* g = top.child("cfg_guide")) {
        detail::Reader r(*g, "cfg_guide");
        std::string style(to_string(c.cfg_guide.style));
        r.get("style", style);
        c.cfg_guide.style = cfg_guide_style_from_string(style);
        r.get("joint_dropout", c.cfg_guide.joint_dropout);
        r.get("init_from_pretrained", c.cfg_guide.init_from_pretrained);
        r.finish();
    }
    top.get("target_data_size", c.target_data_size);
    if (const auto* s = top.child("sampler")) {
        detail::Reader r(*s, "sampler");
        r.get("steps", c.sampler.steps);
        r.get("n", c.sampler.n);
        r.finish();
    }
    top.get("w", c.w);
    if (const auto* m = top.child("metrics")) {
        detail::Reader r(*m, "metrics");
        r.get("radius_sigmas", c.metrics.radius_sigmas);
        r.get("knn_k", c.metrics.knn_k);
        r.get("reference_n", c.metrics.reference_n);
        r.finish();
    }
    if (const auto* f = top.child("figure2")) {
        detail::Reader r(*f, "figure2");
        r.get("grid_n", c.figure2.grid_n);
        r.get("grid_margin", c.figure2.grid_margin);
        r.get("field_class", c.figure2.field_class);
        r.get("field_fraction", c.figure2.field_fraction);
        r.get("trajectory_chains", c.figure2.trajectory_chains);
        r.finish();
    }
    top.get("seeds", c.seeds);
    top.get("output_dir", c.output_dir);
    top.finish();
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return config_from_json(j);
}

/// Hash of everything that determines a run's results apart from its seed.
inline std::string config_fingerprint(const ExperimentConfig& c) {
    nlohmann::json j = to_json(c);
    j.erase("seeds");
    j.erase("output_dir");
    return hex64(fnv1a(j.dump()));
}

/// Seed of a named sub-task of run `seed` (pre-training, sampling, ...).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
    return Stream(seed, fnv1a(tag)).key();
}

}  // namespace dog::lab
