// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "dog/error.hpp"
#include "dog/linalg.hpp"

namespace dog {

//---------------------------------------------------------------------------//
/*!
 * Discrete variance-preserving noise schedule.
 *
 * Timesteps are 1-based: t = 1..T index the stored arrays, and t = 0
 * denotes clean data (abar = 1).
 */
class NoiseSchedule {
  public:
    NoiseSchedule(std::vector<double> beta, double beta_start, double beta_end)
        : beta_(std::move(beta)), beta_start_(beta_start), beta_end_(beta_end) {
        detail::require(!beta_.empty(), "NoiseSchedule: need at least one timestep");
        abar_.resize(beta_.size());
        bbar_.resize(beta_.size());
        double prod = 1.0;
        for (std::size_t i = 0; i < beta_.size(); ++i) {
            detail::require(beta_[i] > 0.0 && beta_[i] < 1.0, "NoiseSchedule: beta must lie in (0, 1)");
            prod *= 1.0 - beta_[i];
            abar_[i] = prod;
            bbar_[i] = 1.0 - prod;
        }
    }

    [[nodiscard]] int T() const noexcept { return static_cast<int>(beta_.size()); }

    [[nodiscard]] double beta(int t) const { return beta_.at(index(t)); }

    /// Cumulative signal fraction; abar(0) = 1.
    [[nodiscard]] double abar(int t) const {
        if (t == 0) return 1.0;
        return abar_[index(t)];
    }

    /// 1 - abar(t) as stored.
    [[nodiscard]] double bbar(int t) const {
        if (t == 0) return 0.0;
        return bbar_[index(t)];
    }

    [[nodiscard]] const std::vector<double>& betas() const noexcept { return beta_; }
    [[nodiscard]] const std::vector<double>& abars() const noexcept { return abar_; }
    [[nodiscard]] const std::vector<double>& bbars() const noexcept { return bbar_; }
    [[nodiscard]] double beta_start() const noexcept { return beta_start_; }
    [[nodiscard]] double beta_end() const noexcept { return beta_end_; }

    /// Short text identifying the schedule, stored in checkpoints.
    [[nodiscard]] std::string fingerprint() const {
        char buf[96];
        std::snprintf(buf, sizeof buf, "linear:T=%d:beta=%.17g..%.17g", T(), beta_start_, beta_end_);
        return buf;
    }

  private:
    [[nodiscard]] std::size_t index(int t) const {
        if (t < 1 || t > T())
            throw InvalidInput("NoiseSchedule: timestep " + std::to_string(t) + " outside [1, " +
                               std::to_string(T()) + "]");
        return static_cast<std::size_t>(t - 1);
    }

    std::vector<double> beta_;
    std::vector<double> abar_;
    std::vector<double> bbar_;
    double beta_start_;
    double beta_end_;
};

/// beta linearly interpolated from beta_start (t = 1) to beta_end (t = T).
inline NoiseSchedule linear_schedule(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
    detail::require(T >= 1, "linear_schedule: T must be at least 1");
    detail::require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
                    "linear_schedule: need 0 < beta_start <= beta_end < 1");
    std::vector<double> beta(static_cast<std::size_t>(T));
    for (int i = 0; i < T; ++i) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
        beta[static_cast<std::size_t>(i)] = beta_start + frac * (beta_end - beta_start);
    }
    return NoiseSchedule(std::move(beta), beta_start, beta_end);
}

/// x_t = sqrt(abar) x0 + sqrt(1 - abar) eps
inline Vec forward_noise(const Eigen::Ref<const Vec>& x0, double abar, const Eigen::Ref<const Vec>& eps) {
    detail::require(abar > 0.0 && abar <= 1.0, "forward_noise: abar must lie in (0, 1]");
    detail::require_dim(eps.size(), x0.size(), "forward_noise");
    return std::sqrt(abar) * x0 + std::sqrt(1.0 - abar) * eps;
}

/// score = -eps / sqrt(1 - abar)
inline Vec eps_to_score(const Eigen::Ref<const Vec>& eps, double abar) {
    detail::require(abar > 0.0 && abar < 1.0, "eps_to_score: abar must lie in (0, 1)");
    return -eps / std::sqrt(1.0 - abar);
}

/// eps = -sqrt(1 - abar) score
inline Vec score_to_eps(const Eigen::Ref<const Vec>& score, double abar) {
    detail::require(abar > 0.0 && abar < 1.0, "score_to_eps: abar must lie in (0, 1)");
    return -std::sqrt(1.0 - abar) * score;
}

/*!
 * Decreasing timesteps for a `steps`-step sampler: round(T - k (T - 1) / (steps - 1))
 * for k = 0..steps-1, so the list starts at T and ends at 1. A single step
 * yields {T}.
 */
inline std::vector<int> timestep_subsequence(int T, int steps) {
    detail::require(T >= 1, "timestep_subsequence: T must be at least 1");
    detail::require(steps >= 1 && steps <= T, "timestep_subsequence: need 1 <= steps <= T");
    if (steps == 1) return {T};
    std::vector<int> ts(static_cast<std::size_t>(steps));
    const double stride = static_cast<double>(T - 1) / static_cast<double>(steps - 1);
    for (int k = 0; k < steps; ++k)
        ts[static_cast<std::size_t>(k)] =
            static_cast<int>(std::lround(static_cast<double>(T) - stride * static_cast<double>(k)));
    return ts;
}

}  // namespace dog
