// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dog/denoiser.hpp"
#include "dog/error.hpp"
#include "dog/gmm.hpp"
#include "dog/linalg.hpp"
#include "dog/schedule.hpp"
#include "dog/world.hpp"

namespace dog {

enum class GuidanceMode { none, cfg, dog };

inline std::string_view to_string(GuidanceMode m) {
    switch (m) {
        case GuidanceMode::none: return "none";
        case GuidanceMode::cfg: return "cfg";
        case GuidanceMode::dog: return "dog";
    }
    return "?";
}

inline GuidanceMode guidance_mode_from_string(std::string_view s) {
    if (s == "none") return GuidanceMode::none;
    if (s == "cfg") return GuidanceMode::cfg;
    if (s == "dog") return GuidanceMode::dog;
    throw InvalidInput("unknown guidance mode '" + std::string(s) + "'");
}

//---------------------------------------------------------------------------//
/*!
 * How to turn two denoisers into one guided prediction.
 *
 * `guide` is evaluated with the NULL class: for CFG it is the target-domain
 * unconditional model (either the conditional network itself, trained with
 * label dropout, or a separately trained one); for DoG it is the frozen
 * pre-trained network. NONE ignores `guide` and `w`.
 */
struct GuidanceSpec {
    GuidanceMode mode = GuidanceMode::none;
    double w = 1.0;
    const Denoiser* conditional = nullptr;
    const Denoiser* guide = nullptr;

    void validate() const {
        detail::require(conditional != nullptr, "GuidanceSpec: missing conditional model");
        detail::require(std::isfinite(w), "GuidanceSpec: w must be finite");
        if (mode == GuidanceMode::none) return;
        detail::require(guide != nullptr, "GuidanceSpec: " + std::string(to_string(mode)) + " requires a guide model");
        detail::require(guide->dim() == conditional->dim(), "GuidanceSpec: guide and conditional differ in dimension");
        detail::require(guide->schedule().T() == conditional->schedule().T() &&
                            guide->schedule().abars() == conditional->schedule().abars(),
                        "GuidanceSpec: guide and conditional use different schedules");
    }

    [[nodiscard]] std::string describe() const {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%s:w=%.17g", std::string(to_string(mode)).c_str(), w);
        return buf;
    }
};

/// w * eps_cond - (w - 1) * eps_guide, i.e. eps_cond + (w - 1)(eps_cond - eps_guide).
template <class A, class B>
auto combine(const Eigen::MatrixBase<A>& eps_cond, const Eigen::MatrixBase<B>& eps_guide, double w) {
    if (eps_cond.rows() != eps_guide.rows() || eps_cond.cols() != eps_guide.cols())
        throw InvalidInput("combine: dimension mismatch");
    using Out = Eigen::Matrix<typename A::Scalar, A::RowsAtCompileTime, A::ColsAtCompileTime>;
    return Out(w * eps_cond - (w - 1.0) * eps_guide);
}

/// Guided eps for every row of `x`. CFG and DoG make exactly two denoiser calls.
inline PointSet guided_eps_batch(const GuidanceSpec& spec, const PointSet& x, int t, ClassId c) {
    spec.validate();
    PointSet cond = spec.conditional->eps_batch(x, t, c);
    if (spec.mode == GuidanceMode::none) return cond;
    const PointSet guide = spec.guide->eps_batch(x, t, null_class);
    return combine(cond, guide, spec.w);
}

inline Vec guided_eps(const GuidanceSpec& spec, const Eigen::Ref<const Vec>& x, int t, ClassId c) {
    PointSet row = x.transpose();
    return guided_eps_batch(spec, row, t, c).row(0).transpose();
}

//---------------------------------------------------------------------------//
// Analytic identities on a DomainWorld
//---------------------------------------------------------------------------//

/// Exact denoisers for the three densities involved in DoG vs CFG.
struct WorldOracles {
    OracleDenoiser target;  ///< NULL -> p_t, class k -> p_t(x | k)
    OracleDenoiser source;  ///< NULL -> p_s

    WorldOracles(const DomainWorld& world, const NoiseSchedule& schedule)
        : target(world.target(), class_mixtures(world), schedule),
          source(world.source(), schedule) {}

    [[nodiscard]] GuidanceSpec cfg(double w) const { return {GuidanceMode::cfg, w, &target, &target}; }
    [[nodiscard]] GuidanceSpec dog(double w) const { return {GuidanceMode::dog, w, &target, &source}; }

  private:
    static std::vector<GaussianMixture> class_mixtures(const DomainWorld& world) {
        std::vector<GaussianMixture> out;
        for (int c = 0; c < world.class_count(); ++c) out.push_back(world.class_conditional(c));
        return out;
    }
};

/*!
 * score_DoG - [score_CFG + (w - 1) grad log p(D^tgt | x_t)], with both guided
 * scores assembled from exact oracle eps outputs. `posterior_offset` is added
 * to every coordinate of the posterior gradient (fault injection for tests).
 */
inline Vec prop1_residual(const DomainWorld& world, const WorldOracles& oracles, const Eigen::Ref<const Vec>& x,
                          int t, int c, double w, double posterior_offset = 0.0) {
    const NoiseSchedule& s = oracles.target.schedule();
    const double abar = s.abar(t);
    const Vec score_dog = eps_to_score(guided_eps(oracles.dog(w), x, t, c), abar);
    const Vec score_cfg = eps_to_score(guided_eps(oracles.cfg(w), x, t, c), abar);
    Vec post = domain_posterior_log_grad(world, x, abar);
    post.array() += posterior_offset;
    return score_dog - (score_cfg + (w - 1.0) * post);
}

inline Vec prop1_residual(const DomainWorld& world, const NoiseSchedule& schedule, const Eigen::Ref<const Vec>& x,
                          int t, int c, double w) {
    return prop1_residual(world, WorldOracles(world, schedule), x, t, c, w);
}

struct DensityRatioGap {
    double log_posterior_diff;  ///< log p(D|x_out) - log p(D|x_in)
    double gap;                 ///< (w - 1) * log_posterior_diff = log of (p_DoG / p_CFG) at x_out relative to x_in
};

/// DoG-vs-CFG log density-ratio gap between an outside and an inside point.
inline DensityRatioGap density_ratio_check(const DomainWorld& world, const NoiseSchedule& schedule,
                                           const Eigen::Ref<const Vec>& x_out, const Eigen::Ref<const Vec>& x_in,
                                           int t, double w) {
    const double abar = schedule.abar(t);
    const double diff = domain_posterior_log(world, x_out, abar) - domain_posterior_log(world, x_in, abar);
    return {diff, (w - 1.0) * diff};
}

/// Score-space guidance corrections at one grid point.
struct FieldVectors {
    Vec cfg;
    Vec dog;
};

/*!
 * (w - 1)(eps_cond - eps_guide) for each spec, converted to score space
 * (multiplied by -1 / sqrt(1 - abar_t)), at every row of `grid`. Class `c`
 * conditions both specs.
 */
inline std::vector<FieldVectors> guidance_field(const GuidanceSpec& cfg, const GuidanceSpec& dog,
                                                const PointSet& grid, int t, ClassId c) {
    cfg.validate();
    dog.validate();
    const double abar = cfg.conditional->schedule().abar(t);
    const double to_score = -1.0 / std::sqrt(1.0 - abar);
    auto correction = [&](const GuidanceSpec& s) -> PointSet {
        if (s.mode == GuidanceMode::none) return PointSet::Zero(grid.rows(), grid.cols());
        const PointSet ec = s.conditional->eps_batch(grid, t, c);
        const PointSet eg = s.guide->eps_batch(grid, t, null_class);
        return (to_score * (s.w - 1.0)) * (ec - eg);
    };
    const PointSet a = correction(cfg);
    const PointSet b = correction(dog);
    std::vector<FieldVectors> out;
    out.reserve(static_cast<std::size_t>(grid.rows()));
    for (Eigen::Index i = 0; i < grid.rows(); ++i) out.push_back({a.row(i).transpose(), b.row(i).transpose()});
    return out;
}

}  // namespace dog
