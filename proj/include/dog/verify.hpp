// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dog/denoiser.hpp"
#include "dog/error.hpp"
#include "dog/gmm.hpp"
#include "dog/guidance.hpp"
#include "dog/hash.hpp"
#include "dog/metrics.hpp"
#include "dog/sampler.hpp"
#include "dog/schedule.hpp"
#include "dog/world.hpp"

namespace dog {

//---------------------------------------------------------------------------//
// Thresholds
//---------------------------------------------------------------------------//

/// Every pass/fail threshold used by the verification suites.
struct VerifyThresholds {
    double prop1_sup_norm = 1e-9;        ///< score-decomposition residual, score space
    double theorem1_slack_sigmas = 3.0;  ///< allowed Monte Carlo slack on the 1/sqrt(N) bound
    int theorem1_min_draws = 30;         ///< fewer dataset draws are flagged low-confidence
    double density_ratio_gap = -5.0;     ///< required DoG-vs-CFG log-ratio gap at w = 2
};

inline constexpr VerifyThresholds default_thresholds{};

//---------------------------------------------------------------------------//
// Result record
//---------------------------------------------------------------------------//

enum class VerifyStatus { pass, fail, inconclusive };

inline std::string_view to_string(VerifyStatus s) {
    switch (s) {
        case VerifyStatus::pass: return "pass";
        case VerifyStatus::fail: return "fail";
        case VerifyStatus::inconclusive: return "inconclusive";
    }
    return "?";
}

struct VerificationResult {
    std::string name;
    VerifyStatus status = VerifyStatus::fail;
    double worst = 0.0;      ///< worst residual or margin seen by the check
    double threshold = 0.0;  ///< pass iff worst is within threshold (check-specific direction)
    std::string fingerprint;
    std::uint64_t seed = 0;
    bool low_confidence = false;
    std::vector<std::string> notes;

    [[nodiscard]] bool passed() const noexcept { return status == VerifyStatus::pass; }

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"check", name},         {"status", to_string(status)},
                {"pass", passed()},      {"worst", worst},
                {"threshold", threshold}, {"fingerprint", fingerprint},
                {"seed", seed},          {"low_confidence", low_confidence},
                {"notes", notes}};
    }
};

namespace detail {

inline std::string world_hash(const DomainWorld& world) { return hex64(dog::fnv1a(to_json(world).dump())); }

inline std::string join(const std::vector<double>& v) {
    std::ostringstream s;
    s.precision(17);
    for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
    return s.str();
}

inline std::string join(const std::vector<int>& v) {
    std::ostringstream s;
    for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
    return s.str();
}

inline bool bitwise_equal(const PointSet& a, const PointSet& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace detail

//---------------------------------------------------------------------------//
// Score decomposition: DoG score = CFG score + (w - 1) grad log p(D^tgt | x_t)
//---------------------------------------------------------------------------//

struct Prop1Config {
    int grid_n = 10;
    double grid_lo = 0.0;  ///< grid spans [lo, hi]^2, by default the target region plus its surroundings
    double grid_hi = 8.0;
    std::vector<int> timesteps{1, 50, 250, 500, 1000};
    std::vector<double> w{1.5, 2.0, 4.0};
    double threshold = default_thresholds.prop1_sup_norm;
    double posterior_offset = 0.0;  ///< fault injection: added to the posterior gradient
};

inline VerificationResult verify_proposition1(const DomainWorld& world, const NoiseSchedule& schedule,
                                              const Prop1Config& cfg = {}) {
    detail::require(world.source().dim() == 2, "verify_proposition1: the grid sweep is two-dimensional");
    detail::require(!cfg.timesteps.empty() && !cfg.w.empty(), "verify_proposition1: empty sweep");
    const WorldOracles oracles(world, schedule);
    const PointSet grid = square_grid(cfg.grid_n, cfg.grid_lo, cfg.grid_hi);
    double worst = 0.0;
    for (int t : cfg.timesteps)
        for (int c = 0; c < world.class_count(); ++c)
            for (double w : cfg.w)
                for (Eigen::Index i = 0; i < grid.rows(); ++i) {
                    const Vec r = prop1_residual(world, oracles, grid.row(i).transpose(), t, c, w,
                                                 cfg.posterior_offset);
                    const double m = r.lpNorm<Eigen::Infinity>();
                    worst = std::isfinite(m) ? std::max(worst, m) : std::numeric_limits<double>::infinity();
                }
    VerificationResult res;
    res.name = "prop1";
    res.worst = worst;
    res.threshold = cfg.threshold;
    res.status = worst < cfg.threshold ? VerifyStatus::pass : VerifyStatus::fail;
    res.fingerprint = "prop1:world=" + detail::world_hash(world) + ":" + schedule.fingerprint() + ":grid=" +
                      std::to_string(cfg.grid_n) + "x" + std::to_string(cfg.grid_n) + "[" +
                      detail::join(std::vector<double>{cfg.grid_lo, cfg.grid_hi}) + "]:t=" +
                      detail::join(cfg.timesteps) + ":w=" + detail::join(cfg.w);
    if (cfg.posterior_offset != 0.0) res.notes.push_back("posterior gradient offset injected");
    return res;
}

//---------------------------------------------------------------------------//
// Finite-dataset marginal error: E |p_hat_t - p*_t| <= 1 / sqrt(N)
//---------------------------------------------------------------------------//

struct Theorem1Config {
    std::vector<int> N{4, 16, 64, 256};
    int M = 2000;
    double abar = 0.5;
    int grid_n = 5;
    double grid_lo = -2.0;
    double grid_hi = 2.0;
    std::uint64_t seed = 0;
    double slack_sigmas = default_thresholds.theorem1_slack_sigmas;
    int min_draws = default_thresholds.theorem1_min_draws;
    double bound_scale = 1.0;  ///< fault injection: the bound is multiplied by this factor
};

struct Theorem1Report {
    VerificationResult result;
    std::vector<Theorem1Estimate> estimates;  ///< one per N, in config order
};

/*!
 * Runs the Monte Carlo harness over the N ladder. `worst` is the largest
 * ratio estimate / (bound + slack * standard error) over all N and grid
 * points; the check passes iff it is at most 1. A violated density
 * precondition makes the result inconclusive.
 */
inline Theorem1Report verify_theorem1(const GaussianMixture& base, const Theorem1Config& cfg = {}) {
    detail::require(!cfg.N.empty(), "verify_theorem1: empty N ladder");
    const PointSet grid = square_grid(cfg.grid_n, cfg.grid_lo, cfg.grid_hi);
    Theorem1Report rep;
    VerificationResult& res = rep.result;
    res.name = "thm1";
    res.seed = cfg.seed;
    res.threshold = 1.0;
    double worst = 0.0;
    bool precondition = true;
    for (int n : cfg.N) {
        Theorem1Estimate e = theorem1_mc(base, cfg.abar, n, cfg.M, grid, cfg.seed);
        precondition = precondition && e.precondition_ok;
        if (!e.precondition_ok) res.notes.push_back(e.warning);
        const double bound = cfg.bound_scale * e.bound;
        for (std::size_t i = 0; i < e.mean_error.size(); ++i)
            worst = std::max(worst, e.mean_error[i] / (bound + cfg.slack_sigmas * e.std_error[i]));
        rep.estimates.push_back(std::move(e));
    }
    res.worst = worst;
    res.low_confidence = cfg.M < cfg.min_draws;
    if (res.low_confidence) res.notes.push_back("few dataset draws; standard errors are unreliable");
    if (!precondition)
        res.status = VerifyStatus::inconclusive;
    else
        res.status = worst <= 1.0 ? VerifyStatus::pass : VerifyStatus::fail;
    std::ostringstream fp;
    fp.precision(17);
    fp << "thm1:base=" << hex64(fnv1a(to_json(base).dump())) << ":abar=" << cfg.abar << ":N=" << detail::join(cfg.N)
       << ":M=" << cfg.M << ":grid=" << cfg.grid_n << "x" << cfg.grid_n << "[" << cfg.grid_lo << ","
       << cfg.grid_hi << "]:slack=" << cfg.slack_sigmas;
    if (cfg.bound_scale != 1.0) fp << ":bound_scale=" << cfg.bound_scale;
    res.fingerprint = fp.str();
    return rep;
}

/// The standard-normal base mixture of the default finite-dataset bound check.
inline GaussianMixture standard_normal(Eigen::Index dim = 2) {
    return GaussianMixture::single(Vec::Zero(dim), Mat::Identity(dim, dim));
}

//---------------------------------------------------------------------------//
// Guidance degeneracies at sampler level
//---------------------------------------------------------------------------//

struct DegeneracyModels {
    const Denoiser* conditional = nullptr;  ///< fine-tuned conditional model
    const Denoiser* pretrained = nullptr;   ///< frozen source model, the DoG guide
    const Denoiser* cfg_guide = nullptr;    ///< target-domain unconditional model
};

struct DegeneracyConfig {
    int steps = 20;
    std::size_t n = 64;
    std::uint64_t seed = 0;
    int c = 0;
    std::vector<double> w_identical{0.0, 1.5, 2.0, 4.0};  ///< weights for the guide = conditional check
    double w_one = 1.0;   ///< fault injection: move away from 1 to break the first reduction
    double w_zero = 0.0;  ///< fault injection: move away from 0 to break the second reduction
};

/*!
 * Bitwise sample-level checks:
 *  - at w = 1, DoG, CFG and unguided sampling coincide;
 *  - at w = 0, DoG equals unguided NULL-class sampling of the pre-trained model;
 *  - with guide = conditional, CFG and DoG coincide for every listed w.
 * `worst` counts the failing sub-checks.
 */
inline VerificationResult verify_degeneracies(const DegeneracyModels& m, const DegeneracyConfig& cfg = {}) {
    detail::require(m.conditional && m.pretrained && m.cfg_guide, "verify_degeneracies: missing model");
    SampleRequest req;
    req.steps = cfg.steps;
    req.n = cfg.n;
    req.seed = cfg.seed;
    req.c = cfg.c;
    auto run = [&](GuidanceMode mode, double w, const Denoiser* cond, const Denoiser* guide, ClassId c) {
        SampleRequest r = req;
        r.c = c;
        return sample(GuidanceSpec{mode, w, cond, guide}, r).samples;
    };
    VerificationResult res;
    res.name = "degeneracies";
    res.seed = cfg.seed;
    res.threshold = 0.0;
    int failures = 0;
    auto check = [&](bool ok, const std::string& what) {
        if (!ok) {
            ++failures;
            res.notes.push_back("not bitwise identical: " + what);
        }
    };

    const PointSet none = run(GuidanceMode::none, 1.0, m.conditional, nullptr, cfg.c);
    check(detail::bitwise_equal(run(GuidanceMode::dog, cfg.w_one, m.conditional, m.pretrained, cfg.c), none),
          "DoG at w=1 vs unguided");
    check(detail::bitwise_equal(run(GuidanceMode::cfg, cfg.w_one, m.conditional, m.cfg_guide, cfg.c), none),
          "CFG at w=1 vs unguided");

    const PointSet pre = run(GuidanceMode::none, 1.0, m.pretrained, nullptr, null_class);
    check(detail::bitwise_equal(run(GuidanceMode::dog, cfg.w_zero, m.conditional, m.pretrained, cfg.c), pre),
          "DoG at w=0 vs pre-trained unguided");

    for (double w : cfg.w_identical)
        check(detail::bitwise_equal(run(GuidanceMode::cfg, w, m.conditional, m.conditional, cfg.c),
                                    run(GuidanceMode::dog, w, m.conditional, m.conditional, cfg.c)),
              "CFG vs DoG with guide = conditional at w=" + detail::join(std::vector<double>{w}));

    res.worst = failures;
    res.status = failures == 0 ? VerifyStatus::pass : VerifyStatus::fail;
    std::ostringstream fp;
    fp.precision(17);
    fp << "degeneracies:steps=" << cfg.steps << ":n=" << cfg.n << ":c=" << cfg.c << ":w1=" << cfg.w_one
       << ":w0=" << cfg.w_zero << ":w=" << detail::join(cfg.w_identical);
    res.fingerprint = fp.str();
    return res;
}

//---------------------------------------------------------------------------//
// DoG vs CFG density ratio
//---------------------------------------------------------------------------//

struct DensityRatioConfig {
    double w = 2.0;
    int t = 1;
    double threshold = default_thresholds.density_ratio_gap;
};

/*!
 * For every target mode mean against the farthest non-target source mode
 * mean, the log-ratio gap (w - 1)[log p(D|x_out) - log p(D|x_in)] must fall
 * below the threshold. `worst` is the largest (least negative) gap.
 */
inline VerificationResult verify_density_ratio(const DomainWorld& world, const NoiseSchedule& schedule,
                                               const DensityRatioConfig& cfg = {}) {
    const auto& idx = world.target_indices();
    std::vector<bool> is_target(world.source().size(), false);
    for (auto i : idx) is_target[i] = true;
    VerificationResult res;
    res.name = "density_ratio";
    res.threshold = cfg.threshold;
    double worst = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (auto i : idx) {
        const Vec& x_in = world.source()[i].mean();
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t j = 0; j < world.source().size(); ++j) {
            if (is_target[j]) continue;
            const double d = (world.source()[j].mean() - x_in).squaredNorm();
            if (d > far_d) {
                far_d = d;
                far = j;
            }
        }
        if (far_d < 0.0) break;
        any = true;
        const DensityRatioGap g = density_ratio_check(world, schedule, world.source()[far].mean(), x_in, cfg.t, cfg.w);
        worst = std::max(worst, g.gap);
    }
    if (!any) {
        res.status = VerifyStatus::inconclusive;
        res.notes.push_back("world has no non-target modes");
        worst = 0.0;
    } else {
        res.status = worst < cfg.threshold ? VerifyStatus::pass : VerifyStatus::fail;
    }
    res.worst = worst;
    std::ostringstream fp;
    fp.precision(17);
    fp << "density_ratio:world=" << detail::world_hash(world) << ":" << schedule.fingerprint() << ":t=" << cfg.t
       << ":w=" << cfg.w;
    res.fingerprint = fp.str();
    return res;
}

}  // namespace dog
