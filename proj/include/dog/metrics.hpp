// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dog/error.hpp"
#include "dog/gmm.hpp"
#include "dog/linalg.hpp"
#include "dog/rng.hpp"
#include "dog/schedule.hpp"
#include "dog/world.hpp"

namespace dog {

//---------------------------------------------------------------------------//
// Frechet distance between Gaussian fits
//---------------------------------------------------------------------------//

inline Vec sample_mean(const PointSet& a) { return a.colwise().mean().transpose(); }

/// Unbiased sample covariance (n - 1 denominator).
inline Mat sample_cov(const PointSet& a) {
    const Vec m = sample_mean(a);
    const Mat c = a.rowwise() - m.transpose();
    return (c.transpose() * c) / static_cast<double>(a.rows() - 1);
}

namespace detail {

inline Mat regularized(Mat s, double ridge) {
    Eigen::SelfAdjointEigenSolver<Mat> es(s, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() <= 0.0) s += ridge * Mat::Identity(s.rows(), s.cols());
    return s;
}

// tr (A^{1/2} B A^{1/2})^{1/2} through the symmetric product.
inline double trace_sqrt_product(const Mat& a, const Mat& b) {
    Eigen::SelfAdjointEigenSolver<Mat> ea(a);
    const Vec ra = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Mat a_half = ea.eigenvectors() * ra.asDiagonal() * ea.eigenvectors().transpose();
    Mat m = a_half * b * a_half;
    m = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Mat> em(m, Eigen::EigenvaluesOnly);
    return em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
}

}  // namespace detail

/*!
 * ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}) between Gaussian fits.
 * Singular covariances get a 1e-9 ridge. The cross term is averaged over both
 * argument orders so the result is exactly symmetric, then clamped at zero.
 */
inline double frechet_gaussian(const PointSet& a, const PointSet& b) {
    detail::require_dim(b.cols(), a.cols(), "frechet_gaussian");
    detail::require(a.rows() > a.cols() && b.rows() > b.cols(), "frechet_gaussian: need at least d + 1 points per set");
    constexpr double ridge = 1e-9;
    const Mat sa = detail::regularized(sample_cov(a), ridge);
    const Mat sb = detail::regularized(sample_cov(b), ridge);
    const double mean_term = (sample_mean(a) - sample_mean(b)).squaredNorm();
    const double cross = 0.5 * (detail::trace_sqrt_product(sa, sb) + detail::trace_sqrt_product(sb, sa));
    return std::max(0.0, mean_term + sa.trace() + sb.trace() - 2.0 * cross);
}

/// Closed-form Frechet distance between two Gaussians.
inline double frechet_closed_form(const Vec& mu_a, const Mat& sa, const Vec& mu_b, const Mat& sb) {
    const double cross = 0.5 * (detail::trace_sqrt_product(sa, sb) + detail::trace_sqrt_product(sb, sa));
    return std::max(0.0, (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * cross);
}

//---------------------------------------------------------------------------//
// Domain alignment
//---------------------------------------------------------------------------//

/// Fraction of samples within `radius_sigmas` Mahalanobis units of the nearest target mode.
inline double in_domain_rate(const PointSet& samples, const DomainWorld& world, double radius_sigmas = 3.0) {
    detail::require(samples.rows() > 0, "in_domain_rate: empty sample set");
    detail::require(radius_sigmas > 0.0, "in_domain_rate: radius must be positive");
    detail::require_dim(samples.cols(), world.dim(), "in_domain_rate");
    const double r2 = radius_sigmas * radius_sigmas;
    const auto& target = world.target();
    std::size_t inside = 0;
    for (Eigen::Index i = 0; i < samples.rows(); ++i) {
        const Vec x = samples.row(i).transpose();
        for (const auto& c : target.components()) {
            if (c.mahalanobis2(x) <= r2) {
                ++inside;
                break;
            }
        }
    }
    return static_cast<double>(inside) / static_cast<double>(samples.rows());
}

/// Mean of log p_t(x) over samples, using the clean target mixture.
inline double mean_target_loglik(const PointSet& samples, const DomainWorld& world) {
    detail::require(samples.rows() > 0, "mean_target_loglik: empty sample set");
    detail::require_dim(samples.cols(), world.dim(), "mean_target_loglik");
    double acc = 0.0;
    for (Eigen::Index i = 0; i < samples.rows(); ++i) acc += log_density(world.target(), samples.row(i).transpose());
    return acc / static_cast<double>(samples.rows());
}

//---------------------------------------------------------------------------//
// k-NN precision / recall
//---------------------------------------------------------------------------//

namespace detail {

inline double squared_distance(const PointSet& a, Eigen::Index i, const PointSet& b, Eigen::Index j) {
    double s = 0.0;
    for (Eigen::Index k = 0; k < a.cols(); ++k) {
        const double d = a(i, k) - b(j, k);
        s += d * d;
    }
    return s;
}

/// Squared distance from every point to its k-th nearest other point.
inline std::vector<double> knn_radii2(const PointSet& pts, std::size_t k) {
    const auto n = static_cast<std::size_t>(pts.rows());
    std::vector<double> radii(n), dist;
    dist.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        dist.clear();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i)
                dist.push_back(squared_distance(pts, static_cast<Eigen::Index>(i), pts, static_cast<Eigen::Index>(j)));
        std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k - 1), dist.end());
        radii[i] = dist[k - 1];
    }
    return radii;
}

// Fraction of `query` points lying in the union of balls B(ref_j, radius_j).
// Balls are visited largest first so most queries exit early.
inline double manifold_coverage(const PointSet& query, const PointSet& ref, const std::vector<double>& radii2) {
    std::vector<std::size_t> order(radii2.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return radii2[a] > radii2[b]; });
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < query.rows(); ++i) {
        for (std::size_t j : order) {
            if (squared_distance(query, i, ref, static_cast<Eigen::Index>(j)) <= radii2[j]) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(query.rows());
}

}  // namespace detail

struct PrecisionRecall {
    double precision;
    double recall;
};

/*!
 * Improved k-NN precision and recall. A point is inside a set's manifold when
 * it falls within some member's distance to that member's k-th nearest
 * neighbour (self excluded). Precision covers generated points by the real
 * manifold; recall swaps the roles.
 */
inline PrecisionRecall knn_precision_recall(const PointSet& gen, const PointSet& real, std::size_t k = 3) {
    detail::require_dim(gen.cols(), real.cols(), "knn_precision_recall");
    detail::require(k >= 1, "knn_precision_recall: k must be positive");
    detail::require(static_cast<std::size_t>(gen.rows()) > k && static_cast<std::size_t>(real.rows()) > k,
                    "knn_precision_recall: k must be smaller than both set sizes");
    const auto real_r = detail::knn_radii2(real, k);
    const auto gen_r = detail::knn_radii2(gen, k);
    return {detail::manifold_coverage(gen, real, real_r), detail::manifold_coverage(real, gen, gen_r)};
}

//---------------------------------------------------------------------------//
// Finite-dataset marginal error
//---------------------------------------------------------------------------//

struct Theorem1Estimate {
    int N = 0;
    int M = 0;
    double abar = 0.0;
    double bound = 0.0;               ///< 1 / sqrt(N)
    std::vector<double> mean_error;   ///< E |p_hat - p*| estimate per grid point
    std::vector<double> std_error;    ///< standard error of each estimate
    bool precondition_ok = true;      ///< max q(x | y) <= 1 pointwise
    std::string warning;

    [[nodiscard]] double max_error() const {
        return mean_error.empty() ? 0.0 : *std::max_element(mean_error.begin(), mean_error.end());
    }
};

/// Peak value of q(x_t | y) = N(sqrt(abar) y, (1 - abar) I).
inline double kernel_peak_density(double abar, Eigen::Index dim) {
    return std::pow(2.0 * std::numbers::pi * (1.0 - abar), -0.5 * static_cast<double>(dim));
}

/*!
 * Monte Carlo estimate of E_D |p_hat_t(x) - p*_t(x)| where p_hat_t is the
 * noised empirical distribution of N draws from `base` and p*_t the exact
 * noised marginal. Draw m uses stream (seed, m); the reduction runs in draw
 * order, so results are reproducible bitwise.
 */
inline Theorem1Estimate theorem1_mc(const GaussianMixture& base, double abar, int N, int M, const PointSet& grid,
                                    std::uint64_t seed) {
    detail::require(N >= 1 && M >= 1, "theorem1_mc: need N >= 1 and M >= 1");
    detail::require(abar > 0.0 && abar < 1.0, "theorem1_mc: abar must lie in (0, 1)");
    detail::require_dim(grid.cols(), base.dim(), "theorem1_mc");
    Theorem1Estimate est;
    est.N = N;
    est.M = M;
    est.abar = abar;
    est.bound = 1.0 / std::sqrt(static_cast<double>(N));
    const Eigen::Index d = base.dim();
    const double bbar = 1.0 - abar;
    const double log_norm = -0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi * bbar);
    if (kernel_peak_density(abar, d) > 1.0) {
        est.precondition_ok = false;
        est.warning = "kernel density exceeds 1 at its peak (1 - abar < 1/(2 pi) in 2D); the 1/sqrt(N) bound is not "
                      "guaranteed";
    }
    const GaussianMixture exact = noised_marginal(base, abar);
    const auto g = static_cast<std::size_t>(grid.rows());
    std::vector<double> p_star(g);
    for (std::size_t i = 0; i < g; ++i) p_star[i] = density(exact, grid.row(static_cast<Eigen::Index>(i)).transpose());

    std::vector<double> sum(g, 0.0), sum2(g, 0.0);
    const double s = std::sqrt(abar);
    for (int m = 0; m < M; ++m) {
        Stream rng(seed, static_cast<std::uint64_t>(m));
        const PointSet y = sample(base, static_cast<std::size_t>(N), rng);
        for (std::size_t i = 0; i < g; ++i) {
            const auto gi = static_cast<Eigen::Index>(i);
            double acc = 0.0;
            for (Eigen::Index k = 0; k < y.rows(); ++k) {
                double r2 = 0.0;
                for (Eigen::Index j = 0; j < d; ++j) {
                    const double diff = grid(gi, j) - s * y(k, j);
                    r2 += diff * diff;
                }
                acc += std::exp(log_norm - 0.5 * r2 / bbar);
            }
            const double err = std::abs(acc / static_cast<double>(N) - p_star[i]);
            sum[i] += err;
            sum2[i] += err * err;
        }
    }
    est.mean_error.resize(g);
    est.std_error.resize(g);
    for (std::size_t i = 0; i < g; ++i) {
        const double mean = sum[i] / M;
        est.mean_error[i] = mean;
        if (M >= 2) {
            const double var = std::max(0.0, (sum2[i] - M * mean * mean) / (M - 1));
            est.std_error[i] = std::sqrt(var / M);
        } else {
            // One draw gives no spread estimate; use the estimate itself as its scale.
            est.std_error[i] = mean;
        }
    }
    return est;
}

/// Uniform n x n grid over [lo, hi]^2, row-major in (x0 slow, x1 fast).
inline PointSet square_grid(int n, double lo, double hi) {
    detail::require(n >= 1, "square_grid: n must be positive");
    PointSet g(n * n, 2);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double a = n == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * i / (n - 1);
            const double b = n == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * j / (n - 1);
            g(i * n + j, 0) = a;
            g(i * n + j, 1) = b;
        }
    return g;
}

//---------------------------------------------------------------------------//
// Report
//---------------------------------------------------------------------------//

struct MetricsReport {
    double frechet2 = 0.0;
    double in_domain_rate = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double mean_target_loglik = 0.0;
    std::size_t sample_count = 0;
    std::string config_fingerprint;

    void validate() const {
        const bool finite = std::isfinite(frechet2) && std::isfinite(in_domain_rate) && std::isfinite(precision) &&
                            std::isfinite(recall) && std::isfinite(mean_target_loglik);
        if (!finite) throw NumericalError("MetricsReport: non-finite metric");
        auto rate = [](double r) { return r >= 0.0 && r <= 1.0; };
        if (!rate(in_domain_rate) || !rate(precision) || !rate(recall))
            throw NumericalError("MetricsReport: rate outside [0, 1]");
    }

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"frechet2", frechet2},   {"in_domain_rate", in_domain_rate},
                {"precision", precision}, {"recall", recall},
                {"mean_target_loglik", mean_target_loglik}, {"sample_count", sample_count},
                {"config_fingerprint", config_fingerprint}};
    }

    static MetricsReport from_json(const nlohmann::json& j) {
        MetricsReport r;
        r.frechet2 = j.at("frechet2").get<double>();
        r.in_domain_rate = j.at("in_domain_rate").get<double>();
        r.precision = j.at("precision").get<double>();
        r.recall = j.at("recall").get<double>();
        r.mean_target_loglik = j.at("mean_target_loglik").get<double>();
        r.sample_count = j.at("sample_count").get<std::size_t>();
        r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
        return r;
    }

    /// One "name value" line per metric.
    [[nodiscard]] std::string flat_record() const {
        char buf[512];
        std::snprintf(buf, sizeof buf,
                      "frechet2 %.17g\nin_domain_rate %.17g\nprecision %.17g\nrecall %.17g\n"
                      "mean_target_loglik %.17g\nsample_count %zu\n",
                      frechet2, in_domain_rate, precision, recall, mean_target_loglik, sample_count);
        return buf;
    }
};

struct EvaluationParams {
    double radius_sigmas = 3.0;
    std::size_t knn_k = 3;
};

/// All metrics of `samples` against a reference target sample set.
inline MetricsReport evaluate(const PointSet& samples, const PointSet& reference, const DomainWorld& world,
                              const EvaluationParams& params = {}) {
    MetricsReport r;
    r.frechet2 = frechet_gaussian(samples, reference);
    r.in_domain_rate = in_domain_rate(samples, world, params.radius_sigmas);
    const auto pr = knn_precision_recall(samples, reference, params.knn_k);
    r.precision = pr.precision;
    r.recall = pr.recall;
    r.mean_target_loglik = mean_target_loglik(samples, world);
    r.sample_count = static_cast<std::size_t>(samples.rows());
    r.validate();
    return r;
}

}  // namespace dog
