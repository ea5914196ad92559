// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dog/error.hpp"
#include "dog/gmm.hpp"
#include "dog/linalg.hpp"
#include "dog/rng.hpp"

namespace dog {

/// Geometry used by `build_world`. Every region is an axis-aligned box.
struct LayoutParams {
    double box_half_width = 10.0;     ///< source means drawn in [-h, h]^d
    double target_center = 4.0;       ///< target region centered at (c, ..., c)
    double target_half_width = 2.0;   ///< target region [c - w, c + w]^d
    double exclusion_margin = 1.0;    ///< non-target means keep this far outside the target region
    double sigma_min = 0.25;          ///< isotropic std of each mode, log-uniform in [min, max]
    double sigma_max = 0.5;
};

//---------------------------------------------------------------------------//
/*!
 * Source mixture p_s plus a target domain made of a subset of its modes.
 *
 * Target modes are labelled with a class; p_t and p_t(x | c) are the source
 * components restricted to the target (resp. class) indices with weights
 * renormalized. `target_prior` is the total source weight of the target
 * modes, i.e. p(D^tgt) when the target is read as a sub-population of the
 * source.
 */
class DomainWorld {
  public:
    DomainWorld(GaussianMixture source, std::vector<std::size_t> target_indices,
                std::vector<int> target_classes)
        : source_(std::move(source)),
          target_indices_(std::move(target_indices)),
          target_classes_(std::move(target_classes)),
          target_(make_target()),
          classes_(make_classes()) {}

    [[nodiscard]] const GaussianMixture& source() const noexcept { return source_; }
    [[nodiscard]] const GaussianMixture& target() const noexcept { return target_; }
    [[nodiscard]] const GaussianMixture& class_conditional(int c) const {
        detail::require(c >= 0 && c < class_count(), "DomainWorld: unknown class " + std::to_string(c));
        return classes_[static_cast<std::size_t>(c)];
    }
    [[nodiscard]] const std::vector<std::size_t>& target_indices() const noexcept {
        return target_indices_;
    }
    [[nodiscard]] const std::vector<int>& target_classes() const noexcept { return target_classes_; }
    [[nodiscard]] int class_count() const noexcept { return static_cast<int>(classes_.size()); }
    [[nodiscard]] double target_prior() const noexcept { return target_prior_; }
    [[nodiscard]] Eigen::Index dim() const noexcept { return source_.dim(); }

    /// Class label of target mode k (k indexes into target_indices), aligned
    /// with the components of `target()`.
    [[nodiscard]] int class_of_target_mode(std::size_t k) const { return target_classes_.at(k); }

    /// True when every source mode is also a target mode.
    [[nodiscard]] bool target_is_source() const noexcept {
        return target_indices_.size() == source_.size();
    }

  private:
    GaussianMixture make_target() {
        detail::require(!target_indices_.empty(), "DomainWorld: target must contain at least one mode");
        detail::require(target_indices_.size() == target_classes_.size(),
                        "DomainWorld: every target mode needs exactly one class");
        std::set<std::size_t> seen;
        std::vector<GaussianComponent> comps;
        target_prior_ = 0.0;
        for (std::size_t idx : target_indices_) {
            detail::require(idx < source_.size(), "DomainWorld: target index out of range");
            detail::require(seen.insert(idx).second, "DomainWorld: duplicate target index");
            comps.push_back(source_[idx]);
            target_prior_ += source_[idx].weight();
        }
        for (int c : target_classes_)
            detail::require(c >= 0, "DomainWorld: class labels must be nonnegative");
        return GaussianMixture::normalized(std::move(comps));
    }

    std::vector<GaussianMixture> make_classes() const {
        int max_class = 0;
        for (int c : target_classes_) max_class = std::max(max_class, c);
        std::vector<GaussianMixture> out;
        for (int c = 0; c <= max_class; ++c) {
            std::vector<GaussianComponent> comps;
            for (std::size_t k = 0; k < target_indices_.size(); ++k)
                if (target_classes_[k] == c) comps.push_back(source_[target_indices_[k]]);
            detail::require(!comps.empty(), "DomainWorld: class " + std::to_string(c) + " has no modes");
            out.push_back(GaussianMixture::normalized(std::move(comps)));
        }
        return out;
    }

    GaussianMixture source_;
    std::vector<std::size_t> target_indices_;
    std::vector<int> target_classes_;
    double target_prior_ = 0.0;
    GaussianMixture target_;
    std::vector<GaussianMixture> classes_;
};

//---------------------------------------------------------------------------//
/*!
 * grad log p(D^tgt | x_t) = grad log p_t^tgt(x) - grad log p_t^src(x) at noise
 * level abar. The prior p(D^tgt) is a constant and drops out.
 */
inline Vec domain_posterior_log_grad(const DomainWorld& world, const Eigen::Ref<const Vec>& x,
                                     double abar) {
    detail::require_dim(x.size(), world.dim(), "domain_posterior_log_grad");
    if (world.target_is_source()) return Vec::Zero(world.dim());
    const auto tgt = noised_marginal(world.target(), abar);
    const auto src = noised_marginal(world.source(), abar);
    return score(tgt, x) - score(src, x);
}

/// log p(D^tgt | x_t) = log prior + log p_t^tgt(x) - log p_t^src(x).
inline double domain_posterior_log(const DomainWorld& world, const Eigen::Ref<const Vec>& x,
                                   double abar) {
    detail::require_dim(x.size(), world.dim(), "domain_posterior_log");
    const auto tgt = noised_marginal(world.target(), abar);
    const auto src = noised_marginal(world.source(), abar);
    return std::log(world.target_prior()) + log_density(tgt, x) - log_density(src, x);
}

//---------------------------------------------------------------------------//
/*!
 * Random world: n_target modes placed uniformly in the target box (the
 * first half, rounded up, in the lower half along axis 0 and labelled class
 * 0, the rest in the upper half as class 1), then n_source - n_target modes
 * placed uniformly in the outer box but outside the target box grown by the
 * exclusion margin. All modes are isotropic with log-uniform std and equal
 * weight. Target modes take indices [0, n_target).
 */
inline DomainWorld build_world(std::uint64_t seed, std::size_t n_source, std::size_t n_target,
                               Eigen::Index dim, const LayoutParams& layout = {}) {
    detail::require(dim >= 1, "build_world: dim must be positive");
    detail::require(n_target >= 1 && n_target < n_source, "build_world: need 1 <= n_target < n_source");
    const double h = layout.box_half_width;
    const double lo = layout.target_center - layout.target_half_width;
    const double hi = layout.target_center + layout.target_half_width;
    detail::require(h > 0.0 && layout.target_half_width > 0.0, "build_world: region sizes must be positive");
    detail::require(lo >= -h && hi <= h, "build_world: target region lies outside the bounding box");
    detail::require(layout.exclusion_margin >= 0.0, "build_world: negative exclusion margin");
    detail::require(layout.sigma_min > 0.0 && layout.sigma_min <= layout.sigma_max,
                    "build_world: need 0 < sigma_min <= sigma_max");
    const double ex_lo = lo - layout.exclusion_margin;
    const double ex_hi = hi + layout.exclusion_margin;
    detail::require(ex_lo > -h || ex_hi < h,
                    "build_world: exclusion zone covers the whole bounding box");

    Stream means_rng(seed, 1);
    Stream sigma_rng(seed, 2);
    const double weight = 1.0 / static_cast<double>(n_source);
    const double log_lo = std::log(layout.sigma_min);
    const double log_hi = std::log(layout.sigma_max);
    auto draw_cov = [&] {
        const double s = std::exp(sigma_rng.uniform(log_lo, log_hi));
        return Mat(s * s * Mat::Identity(dim, dim));
    };

    std::vector<GaussianComponent> comps;
    std::vector<std::size_t> target_idx;
    std::vector<int> classes;
    const std::size_t n_class0 = (n_target + 1) / 2;
    const double mid = layout.target_center;
    for (std::size_t k = 0; k < n_target; ++k) {
        const int c = k < n_class0 ? 0 : 1;
        Vec m(dim);
        for (Eigen::Index j = 0; j < dim; ++j) m[j] = means_rng.uniform(lo, hi);
        m[0] = c == 0 ? means_rng.uniform(lo, mid) : means_rng.uniform(mid, hi);
        comps.emplace_back(std::move(m), draw_cov(), weight);
        target_idx.push_back(k);
        classes.push_back(c);
    }
    auto inside_exclusion = [&](const Vec& m) {
        for (Eigen::Index j = 0; j < dim; ++j)
            if (m[j] < ex_lo || m[j] > ex_hi) return false;
        return true;
    };
    while (comps.size() < n_source) {
        Vec m(dim);
        for (Eigen::Index j = 0; j < dim; ++j) m[j] = means_rng.uniform(-h, h);
        if (inside_exclusion(m)) continue;
        comps.emplace_back(std::move(m), draw_cov(), weight);
    }
    return DomainWorld(GaussianMixture::normalized(std::move(comps)), std::move(target_idx),
                       std::move(classes));
}

/// Whether x lies inside the target box of `layout`.
inline bool in_target_region(const Eigen::Ref<const Vec>& x, const LayoutParams& layout) {
    const double lo = layout.target_center - layout.target_half_width;
    const double hi = layout.target_center + layout.target_half_width;
    for (Eigen::Index j = 0; j < x.size(); ++j)
        if (x[j] < lo || x[j] > hi) return false;
    return true;
}

//---------------------------------------------------------------------------//
// Serialization. Doubles are written in shortest round-trip decimal form, so
// a save/load cycle is lossless.
//---------------------------------------------------------------------------//

inline nlohmann::json to_json(const GaussianMixture& mix) {
    nlohmann::json comps = nlohmann::json::array();
    for (const auto& c : mix.components()) {
        const Mat& cov = c.cov();
        std::vector<double> flat;
        flat.reserve(static_cast<std::size_t>(cov.size()));
        for (Eigen::Index i = 0; i < cov.rows(); ++i)
            for (Eigen::Index j = 0; j < cov.cols(); ++j) flat.push_back(cov(i, j));
        comps.push_back({{"weight", c.weight()},
                         {"mean", std::vector<double>(c.mean().data(), c.mean().data() + c.dim())},
                         {"cov", flat}});
    }
    return {{"dim", mix.dim()}, {"components", comps}};
}

inline GaussianMixture mixture_from_json(const nlohmann::json& j) {
    try {
        const auto d = j.at("dim").get<Eigen::Index>();
        std::vector<GaussianComponent> comps;
        for (const auto& c : j.at("components")) {
            const auto mean = c.at("mean").get<std::vector<double>>();
            const auto cov = c.at("cov").get<std::vector<double>>();
            if (static_cast<Eigen::Index>(mean.size()) != d ||
                static_cast<Eigen::Index>(cov.size()) != d * d)
                throw FormatError("mixture: component shape does not match dim");
            Vec m = Eigen::Map<const Vec>(mean.data(), d);
            Mat s(d, d);
            for (Eigen::Index r = 0; r < d; ++r)
                for (Eigen::Index k = 0; k < d; ++k) s(r, k) = cov[static_cast<std::size_t>(r * d + k)];
            comps.emplace_back(std::move(m), std::move(s), c.at("weight").get<double>());
        }
        return GaussianMixture(std::move(comps));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("mixture: ") + e.what());
    } catch (const InvalidInput& e) {
        throw FormatError(std::string("mixture: ") + e.what());
    }
}

inline nlohmann::json to_json(const DomainWorld& world) {
    return {{"source", to_json(world.source())},
            {"target_mode_indices", world.target_indices()},
            {"class_partition", world.target_classes()},
            {"target_prior", world.target_prior()}};
}

inline DomainWorld world_from_json(const nlohmann::json& j) {
    try {
        return DomainWorld(mixture_from_json(j.at("source")),
                           j.at("target_mode_indices").get<std::vector<std::size_t>>(),
                           j.at("class_partition").get<std::vector<int>>());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("world: ") + e.what());
    } catch (const InvalidInput& e) {
        throw FormatError(std::string("world: ") + e.what());
    }
}

inline void save_world(const DomainWorld& world, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path + " for writing");
    out << to_json(world).dump(2) << '\n';
    if (!out) throw Error("failed writing " + path);
}

inline DomainWorld load_world(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    return world_from_json(j);
}

}  // namespace dog
