// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dog/error.hpp"
#include "dog/gmm.hpp"
#include "dog/linalg.hpp"
#include "dog/schedule.hpp"

namespace dog {

/// Class condition; std::nullopt selects the unconditional (NULL) branch.
using ClassId = std::optional<int>;

inline constexpr ClassId null_class = std::nullopt;

//---------------------------------------------------------------------------//
/*!
 * Noise predictor eps(x_t, t, c).
 *
 * Implementations are pure: the same (x, t, c) always yields the same
 * output, and concurrent evaluation from several threads is safe.
 */
class Denoiser {
  public:
    virtual ~Denoiser() = default;

    [[nodiscard]] virtual Eigen::Index dim() const = 0;
    [[nodiscard]] virtual const NoiseSchedule& schedule() const = 0;
    [[nodiscard]] virtual int class_count() const = 0;

    /// eps prediction for every row of `x` at a shared (t, c).
    [[nodiscard]] virtual PointSet eps_batch(const PointSet& x, int t, ClassId c) const = 0;

    [[nodiscard]] Vec eps(const Eigen::Ref<const Vec>& x, int t, ClassId c) const {
        PointSet row = x.transpose();
        return eps_batch(row, t, c).row(0).transpose();
    }

  protected:
    void check_inputs(const PointSet& x, int t, ClassId c) const {
        detail::require_dim(x.cols(), dim(), "Denoiser");
        if (t < 1 || t > schedule().T())
            throw InvalidInput("Denoiser: timestep " + std::to_string(t) + " outside [1, " +
                               std::to_string(schedule().T()) + "]");
        if (c && (*c < 0 || *c >= class_count()))
            throw InvalidInput("Denoiser: unknown class id " + std::to_string(*c));
    }
};

//---------------------------------------------------------------------------//
/*!
 * Exact denoiser for a known data distribution.
 *
 * For x_0 ~ mixture the optimal predictor is eps = -sqrt(1 - abar_t) times
 * the score of the noised marginal. The NULL branch uses `unconditional`;
 * class k uses `per_class[k]`.
 */
class OracleDenoiser final : public Denoiser {
  public:
    OracleDenoiser(GaussianMixture unconditional, std::vector<GaussianMixture> per_class,
                   NoiseSchedule schedule)
        : unconditional_(std::move(unconditional)),
          per_class_(std::move(per_class)),
          schedule_(std::move(schedule)) {
        for (const auto& m : per_class_)
            detail::require(m.dim() == unconditional_.dim(), "OracleDenoiser: class mixtures differ in dimension");
    }

    OracleDenoiser(GaussianMixture unconditional, NoiseSchedule schedule)
        : OracleDenoiser(std::move(unconditional), {}, std::move(schedule)) {}

    [[nodiscard]] Eigen::Index dim() const override { return unconditional_.dim(); }
    [[nodiscard]] const NoiseSchedule& schedule() const override { return schedule_; }
    [[nodiscard]] int class_count() const override { return static_cast<int>(per_class_.size()); }

    [[nodiscard]] const GaussianMixture& data(ClassId c) const {
        return c ? per_class_.at(static_cast<std::size_t>(*c)) : unconditional_;
    }

    [[nodiscard]] PointSet eps_batch(const PointSet& x, int t, ClassId c) const override {
        check_inputs(x, t, c);
        const double abar = schedule_.abar(t);
        const GaussianMixture noised = noised_marginal(data(c), abar);
        const double s = std::sqrt(1.0 - abar);
        PointSet out(x.rows(), x.cols());
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const Vec xi = x.row(i).transpose();
            out.row(i) = (-s * score(noised, xi)).transpose();
        }
        return out;
    }

  private:
    GaussianMixture unconditional_;
    std::vector<GaussianMixture> per_class_;
    NoiseSchedule schedule_;
};

//---------------------------------------------------------------------------//
/*!
 * Forwards to another denoiser and counts calls, split by condition.
 * Used to check which branches a sampling run actually evaluates.
 */
class CountingDenoiser final : public Denoiser {
  public:
    explicit CountingDenoiser(const Denoiser& inner) : inner_(inner) {}

    [[nodiscard]] Eigen::Index dim() const override { return inner_.dim(); }
    [[nodiscard]] const NoiseSchedule& schedule() const override { return inner_.schedule(); }
    [[nodiscard]] int class_count() const override { return inner_.class_count(); }

    [[nodiscard]] PointSet eps_batch(const PointSet& x, int t, ClassId c) const override {
        (c ? conditional_calls_ : null_calls_).fetch_add(static_cast<std::size_t>(x.rows()),
                                                          std::memory_order_relaxed);
        return inner_.eps_batch(x, t, c);
    }

    /// Number of points evaluated with the NULL class.
    [[nodiscard]] std::size_t null_evaluations() const noexcept { return null_calls_.load(); }
    [[nodiscard]] std::size_t conditional_evaluations() const noexcept {
        return conditional_calls_.load();
    }

  private:
    const Denoiser& inner_;
    mutable std::atomic<std::size_t> null_calls_{0};
    mutable std::atomic<std::size_t> conditional_calls_{0};
};

}  // namespace dog
