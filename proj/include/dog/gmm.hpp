// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <numeric>
#include <utility>
#include <vector>

#include "dog/error.hpp"
#include "dog/linalg.hpp"
#include "dog/rng.hpp"

namespace dog {

//---------------------------------------------------------------------------//
/*!
 * One weighted Gaussian. The Cholesky factor and log normalizer are computed
 * once at construction; construction fails if the covariance is not
 * symmetric positive definite.
 */
class GaussianComponent {
  public:
    GaussianComponent(Vec mean, Mat cov, double weight)
        : mean_(std::move(mean)), cov_(std::move(cov)), weight_(weight) {
        const auto d = mean_.size();
        detail::require(d > 0, "GaussianComponent: empty mean");
        detail::require(cov_.rows() == d && cov_.cols() == d,
                        "GaussianComponent: covariance shape does not match mean");
        detail::require(std::isfinite(weight_) && weight_ >= 0.0,
                        "GaussianComponent: weight must be finite and nonnegative");
        detail::require(mean_.allFinite() && cov_.allFinite(),
                        "GaussianComponent: non-finite mean or covariance");
        const double asym = (cov_ - cov_.transpose()).cwiseAbs().maxCoeff();
        detail::require(asym <= 1e-12 * std::max(1.0, cov_.cwiseAbs().maxCoeff()),
                        "GaussianComponent: covariance is not symmetric");
        llt_.compute(cov_);
        detail::require(llt_.info() == Eigen::Success,
                        "GaussianComponent: covariance is not positive definite");
        const Mat l = llt_.matrixL();
        detail::require((l.diagonal().array() > 0.0).all(),
                        "GaussianComponent: covariance is not positive definite");
        const double half_logdet = l.diagonal().array().log().sum();
        log_norm_ = -0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi) -
                    half_logdet;
    }

    [[nodiscard]] const Vec& mean() const noexcept { return mean_; }
    [[nodiscard]] const Mat& cov() const noexcept { return cov_; }
    [[nodiscard]] double weight() const noexcept { return weight_; }
    [[nodiscard]] Eigen::Index dim() const noexcept { return mean_.size(); }
    [[nodiscard]] Mat cholesky() const { return llt_.matrixL(); }

    /// log N(x | mean, cov)
    [[nodiscard]] double log_pdf(const Eigen::Ref<const Vec>& x) const {
        const Vec z = llt_.matrixL().solve(x - mean_);
        return log_norm_ - 0.5 * z.squaredNorm();
    }

    /// Squared Mahalanobis distance (x - mean)^T cov^{-1} (x - mean).
    [[nodiscard]] double mahalanobis2(const Eigen::Ref<const Vec>& x) const {
        return llt_.matrixL().solve(x - mean_).squaredNorm();
    }

    /// grad log N(x | mean, cov) = -cov^{-1} (x - mean)
    [[nodiscard]] Vec score(const Eigen::Ref<const Vec>& x) const {
        return -llt_.solve(x - mean_);
    }

    /// Returns a copy carrying a different weight.
    [[nodiscard]] GaussianComponent reweighted(double w) const {
        GaussianComponent c = *this;
        detail::require(std::isfinite(w) && w >= 0.0, "GaussianComponent: bad weight");
        c.weight_ = w;
        return c;
    }

  private:
    Vec mean_;
    Mat cov_;
    double weight_;
    Eigen::LLT<Mat> llt_;
    double log_norm_ = 0.0;
};

//---------------------------------------------------------------------------//
/*!
 * Finite mixture of Gaussians sharing one dimension.
 *
 * Zero-weight components are dropped. Weights must already sum to one
 * (within 1e-12); use `normalized` to build from unnormalized weights.
 */
class GaussianMixture {
  public:
    explicit GaussianMixture(std::vector<GaussianComponent> components) {
        for (auto& c : components) {
            if (c.weight() > 0.0) components_.push_back(std::move(c));
        }
        detail::require(!components_.empty(), "GaussianMixture: no components with positive weight");
        dim_ = components_.front().dim();
        double total = 0.0;
        for (const auto& c : components_) {
            detail::require(c.dim() == dim_, "GaussianMixture: components differ in dimension");
            total += c.weight();
        }
        detail::require(std::abs(total - 1.0) <= 1e-12,
                        "GaussianMixture: weights sum to " + std::to_string(total) + ", not 1");
        log_weights_.reserve(components_.size());
        cumulative_.reserve(components_.size());
        double run = 0.0;
        for (const auto& c : components_) {
            log_weights_.push_back(std::log(c.weight()));
            run += c.weight();
            cumulative_.push_back(run);
        }
    }

    /// Rescales weights to sum to one.
    static GaussianMixture normalized(std::vector<GaussianComponent> components) {
        double total = 0.0;
        for (const auto& c : components) total += c.weight();
        detail::require(total > 0.0 && std::isfinite(total), "GaussianMixture: total weight must be positive");
        std::vector<GaussianComponent> out;
        out.reserve(components.size());
        for (const auto& c : components) out.push_back(c.reweighted(c.weight() / total));
        return GaussianMixture(std::move(out));
    }

    /// Single component with unit weight.
    static GaussianMixture single(Vec mean, Mat cov) {
        return GaussianMixture({GaussianComponent(std::move(mean), std::move(cov), 1.0)});
    }

    [[nodiscard]] Eigen::Index dim() const noexcept { return dim_; }
    [[nodiscard]] std::size_t size() const noexcept { return components_.size(); }
    [[nodiscard]] const std::vector<GaussianComponent>& components() const noexcept {
        return components_;
    }
    [[nodiscard]] const GaussianComponent& operator[](std::size_t i) const { return components_.at(i); }
    [[nodiscard]] double log_weight(std::size_t i) const { return log_weights_.at(i); }

    /// Component index for a uniform variate u in [0, 1).
    [[nodiscard]] std::size_t pick(double u) const noexcept {
        const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(),
                                         u * cumulative_.back());
        return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative_.begin()),
                                     components_.size() - 1);
    }

  private:
    std::vector<GaussianComponent> components_;
    std::vector<double> log_weights_;
    std::vector<double> cumulative_;
    Eigen::Index dim_ = 0;
};

//---------------------------------------------------------------------------//
// Evaluation
//---------------------------------------------------------------------------//

struct LogDensityScore {
    double log_density;
    Vec score;
};

namespace detail {

// Per-component log(phi_i N_i(x)) and the log-sum-exp over them.
inline double component_log_terms(const GaussianMixture& mix, const Eigen::Ref<const Vec>& x,
                                  std::vector<double>& terms) {
    require_dim(x.size(), mix.dim(), "GaussianMixture");
    terms.resize(mix.size());
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < mix.size(); ++i) {
        terms[i] = mix.log_weight(i) + mix[i].log_pdf(x);
        hi = std::max(hi, terms[i]);
    }
    if (!std::isfinite(hi)) return hi;
    double acc = 0.0;
    for (double t : terms) acc += std::exp(t - hi);
    return hi + std::log(acc);
}

}  // namespace detail

inline double log_density(const GaussianMixture& mix, const Eigen::Ref<const Vec>& x) {
    std::vector<double> terms;
    return detail::component_log_terms(mix, x, terms);
}

/// p(x) = sum_i phi_i N(x | mu_i, Sigma_i)
inline double density(const GaussianMixture& mix, const Eigen::Ref<const Vec>& x) {
    return std::exp(log_density(mix, x));
}

/// (log p(x), grad log p(x)) with responsibilities taken in log space.
inline LogDensityScore log_density_and_score(const GaussianMixture& mix,
                                             const Eigen::Ref<const Vec>& x) {
    std::vector<double> terms;
    const double lse = detail::component_log_terms(mix, x, terms);
    Vec score = Vec::Zero(mix.dim());
    if (!std::isfinite(lse)) {
        // Every component underflowed; fall back to the nearest in Mahalanobis
        // terms, which dominates the mixture asymptotically.
        std::size_t best = 0;
        for (std::size_t i = 1; i < terms.size(); ++i)
            if (terms[i] > terms[best]) best = i;
        return {lse, mix[best].score(x)};
    }
    for (std::size_t i = 0; i < mix.size(); ++i) {
        const double r = std::exp(terms[i] - lse);
        if (r > 0.0) score.noalias() += r * mix[i].score(x);
    }
    return {lse, std::move(score)};
}

inline Vec score(const GaussianMixture& mix, const Eigen::Ref<const Vec>& x) {
    return log_density_and_score(mix, x).score;
}

/// Posterior component probabilities r_i(x).
inline Vec responsibilities(const GaussianMixture& mix, const Eigen::Ref<const Vec>& x) {
    std::vector<double> terms;
    const double lse = detail::component_log_terms(mix, x, terms);
    Vec r(static_cast<Eigen::Index>(mix.size()));
    for (std::size_t i = 0; i < mix.size(); ++i)
        r[static_cast<Eigen::Index>(i)] = std::exp(terms[i] - lse);
    return r;
}

//---------------------------------------------------------------------------//
/*!
 * Exact law of x_t = sqrt(abar) x_0 + sqrt(1 - abar) eps for x_0 ~ mix:
 * components (phi_i, sqrt(abar) mu_i, abar Sigma_i + (1 - abar) I).
 */
inline GaussianMixture noised_marginal(const GaussianMixture& mix, double abar) {
    detail::require(abar > 0.0 && abar <= 1.0, "noised_marginal: abar must lie in (0, 1]");
    if (abar == 1.0) return mix;
    const double s = std::sqrt(abar);
    const Mat eye = Mat::Identity(mix.dim(), mix.dim());
    std::vector<GaussianComponent> out;
    out.reserve(mix.size());
    for (const auto& c : mix.components())
        out.emplace_back(s * c.mean(), abar * c.cov() + (1.0 - abar) * eye, c.weight());
    return GaussianMixture(std::move(out));
}

//---------------------------------------------------------------------------//
// Sampling
//---------------------------------------------------------------------------//

struct LabeledSamples {
    PointSet points;                 ///< n x d
    std::vector<std::size_t> component;  ///< component index per row
};

/// i.i.d. draws: categorical over weights, then mean + L z.
inline LabeledSamples sample_labeled(const GaussianMixture& mix, std::size_t n, Stream& rng) {
    LabeledSamples out{PointSet(static_cast<Eigen::Index>(n), mix.dim()), {}};
    out.component.resize(n);
    std::vector<Mat> chol;
    chol.reserve(mix.size());
    for (const auto& c : mix.components()) chol.push_back(c.cholesky());
    Vec z(mix.dim());
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = mix.pick(rng.uniform());
        for (Eigen::Index j = 0; j < z.size(); ++j) z[j] = rng.normal();
        out.points.row(static_cast<Eigen::Index>(i)) =
            (mix[k].mean() + chol[k].triangularView<Eigen::Lower>() * z).transpose();
        out.component[i] = k;
    }
    return out;
}

inline PointSet sample(const GaussianMixture& mix, std::size_t n, Stream& rng) {
    return sample_labeled(mix, n, rng).points;
}

//---------------------------------------------------------------------------//
// Moments
//---------------------------------------------------------------------------//

inline Vec mixture_mean(const GaussianMixture& mix) {
    Vec m = Vec::Zero(mix.dim());
    for (const auto& c : mix.components()) m += c.weight() * c.mean();
    return m;
}

inline Mat mixture_cov(const GaussianMixture& mix) {
    const Vec m = mixture_mean(mix);
    Mat s = Mat::Zero(mix.dim(), mix.dim());
    for (const auto& c : mix.components()) {
        const Vec d = c.mean() - m;
        s += c.weight() * (c.cov() + d * d.transpose());
    }
    return s;
}

}  // namespace dog
