// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <sstream>
#include <utility>
#include <vector>

#include "dog/denoiser.hpp"
#include "dog/error.hpp"
#include "dog/gmm.hpp"
#include "dog/linalg.hpp"
#include "dog/mlp.hpp"
#include "dog/rng.hpp"
#include "dog/schedule.hpp"
#include "dog/world.hpp"

namespace dog {

/// Clean training examples with their class conditions.
struct Batch {
    PointSet x0;                  ///< n x d
    std::vector<ClassId> labels;  ///< one per row
};

//---------------------------------------------------------------------------//
// Data sources
//---------------------------------------------------------------------------//

class DataSource {
  public:
    virtual ~DataSource() = default;
    [[nodiscard]] virtual Batch draw(std::size_t n, Stream& rng) const = 0;
};

/*!
 * Fresh draws from a mixture. Each component may carry a class label;
 * components without one produce NULL-labelled examples.
 */
class MixtureData final : public DataSource {
  public:
    MixtureData(GaussianMixture mix, std::vector<ClassId> component_labels)
        : mix_(std::move(mix)), labels_(std::move(component_labels)) {
        detail::require(labels_.empty() || labels_.size() == mix_.size(),
                        "MixtureData: need one label per component");
    }

    explicit MixtureData(GaussianMixture mix) : MixtureData(std::move(mix), {}) {}

    [[nodiscard]] Batch draw(std::size_t n, Stream& rng) const override {
        auto s = sample_labeled(mix_, n, rng);
        Batch b{std::move(s.points), std::vector<ClassId>(n, null_class)};
        if (!labels_.empty())
            for (std::size_t i = 0; i < n; ++i) b.labels[i] = labels_[s.component[i]];
        return b;
    }

  private:
    GaussianMixture mix_;
    std::vector<ClassId> labels_;
};

/// Uniform resampling with replacement from a fixed dataset.
class FiniteData final : public DataSource {
  public:
    FiniteData(PointSet points, std::vector<ClassId> labels)
        : points_(std::move(points)), labels_(std::move(labels)) {
        detail::require(points_.rows() > 0, "FiniteData: empty dataset");
        detail::require(static_cast<std::size_t>(points_.rows()) == labels_.size(),
                        "FiniteData: need one label per point");
    }

    [[nodiscard]] Batch draw(std::size_t n, Stream& rng) const override {
        Batch b{PointSet(static_cast<Eigen::Index>(n), points_.cols()), std::vector<ClassId>(n)};
        for (std::size_t i = 0; i < n; ++i) {
            const auto k = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(points_.rows())));
            b.x0.row(static_cast<Eigen::Index>(i)) = points_.row(k);
            b.labels[i] = labels_[static_cast<std::size_t>(k)];
        }
        return b;
    }

    [[nodiscard]] const PointSet& points() const noexcept { return points_; }
    [[nodiscard]] const std::vector<ClassId>& labels() const noexcept { return labels_; }

  private:
    PointSet points_;
    std::vector<ClassId> labels_;
};

/// Per-mode class labels aligned with `world.target()` components.
inline std::vector<ClassId> target_mode_labels(const DomainWorld& world) {
    std::vector<ClassId> out;
    for (int c : world.target_classes()) out.emplace_back(c);
    return out;
}

//---------------------------------------------------------------------------//
// Noised batches and the denoising loss
//---------------------------------------------------------------------------//

/// A batch after drawing t, eps and label dropout; columns are examples.
struct NoisedBatch {
    Mat x0;                     ///< d x B clean data
    Mat xt;                     ///< d x B
    Mat eps;                    ///< d x B target noise
    std::vector<int> t;         ///< timestep per column, in [1, T]
    std::vector<ClassId> cond;  ///< condition after dropout
    std::size_t null_count = 0; ///< examples trained on the NULL branch
};

/*!
 * For each example, in order: t ~ U{1..T}, eps ~ N(0, I), then the label is
 * replaced by NULL with probability `dropout`.
 */
inline NoisedBatch draw_noised_batch(const Batch& batch, const NoiseSchedule& schedule, Stream& rng,
                                     double dropout) {
    detail::require(batch.x0.rows() > 0, "loss: empty batch");
    detail::require(dropout >= 0.0 && dropout <= 1.0, "loss: dropout must lie in [0, 1]");
    const Eigen::Index n = batch.x0.rows(), d = batch.x0.cols();
    NoisedBatch nb{batch.x0.transpose(), Mat(d, n), Mat(d, n), std::vector<int>(static_cast<std::size_t>(n)),
                   std::vector<ClassId>(static_cast<std::size_t>(n)), 0};
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto ju = static_cast<std::size_t>(j);
        const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(schedule.T())));
        for (Eigen::Index k = 0; k < d; ++k) nb.eps(k, j) = rng.normal();
        const double abar = schedule.abar(t);
        nb.xt.col(j) = std::sqrt(abar) * nb.x0.col(j) + std::sqrt(1.0 - abar) * nb.eps.col(j);
        nb.t[ju] = t;
        ClassId c = batch.labels.at(ju);
        if (dropout >= 1.0 || (dropout > 0.0 && rng.bernoulli(dropout))) c = null_class;
        if (!c) ++nb.null_count;
        nb.cond[ju] = c;
    }
    return nb;
}

/// Mean over examples of ||eps - eps_hat||^2 for any denoiser.
inline double loss_on(const Denoiser& model, const NoisedBatch& nb) {
    const Eigen::Index n = nb.xt.cols();
    detail::require(n > 0, "loss: empty batch");
    double total = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto ju = static_cast<std::size_t>(j);
        const Vec pred = model.eps(nb.xt.col(j), nb.t[ju], nb.cond[ju]);
        total += (nb.eps.col(j) - pred).squaredNorm();
    }
    return total / static_cast<double>(n);
}

inline double loss(const Denoiser& model, const Batch& batch, const NoiseSchedule& schedule, Stream& rng,
                   double dropout) {
    return loss_on(model, draw_noised_batch(batch, schedule, rng, dropout));
}

/// Builds a forward tape for an MLP on a noised batch.
inline MlpTape make_tape(const MlpParams& p, const Mat& table, const NoiseSchedule& schedule,
                         const NoisedBatch& nb) {
    const Eigen::Index n = nb.xt.cols();
    MlpTape tape;
    tape.x = nb.xt;
    tape.temb.resize(table.rows(), n);
    tape.rows.resize(static_cast<std::size_t>(n));
    tape.scale.resize(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto ju = static_cast<std::size_t>(j);
        const int t = nb.t[ju];
        detail::require(t >= 1 && t <= schedule.T(), "loss: timestep out of range");
        tape.temb.col(j) = table.col(t);
        tape.rows[ju] = p.class_row(nb.cond[ju]);
        tape.scale[j] = MlpDenoiser::output_scale(p.arch().parameterization, schedule, t);
    }
    return tape;
}

struct LossAndGrad {
    double loss;
    MlpParams grad;
};

/// Exact reverse-mode gradient of the mean squared eps error on a fixed batch.
inline LossAndGrad loss_and_gradients_on(const MlpParams& p, const Mat& table, const NoiseSchedule& schedule,
                                         const NoisedBatch& nb) {
    MlpTape tape = make_tape(p, table, schedule, nb);
    mlp_forward(p, tape);
    const double inv_n = 1.0 / static_cast<double>(nb.xt.cols());
    const Mat resid = tape.out - nb.eps;
    const double value = resid.squaredNorm() * inv_n;
    MlpParams grad = p.zeros_like();
    mlp_backward(p, tape, (2.0 * inv_n) * resid, grad);
    return {value, std::move(grad)};
}

inline LossAndGrad loss_and_gradients_on(const MlpDenoiser& model, const NoisedBatch& nb) {
    return loss_and_gradients_on(model.params(), model.embedding_table(), model.schedule(), nb);
}

/// Draws a noised batch from `rng` and differentiates the loss on it.
inline LossAndGrad gradients(const MlpDenoiser& model, const Batch& batch, Stream& rng, double dropout) {
    return loss_and_gradients_on(model, draw_noised_batch(batch, model.schedule(), rng, dropout));
}

//---------------------------------------------------------------------------//
// Adam training
//---------------------------------------------------------------------------//

struct TrainConfig {
    std::size_t batch_size = 128;
    double learning_rate = 1e-3;
    std::size_t steps = 10000;
    double label_dropout = 0.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;

    void validate() const {
        detail::require(batch_size >= 1, "TrainConfig: batch_size must be positive");
        detail::require(learning_rate > 0.0 && std::isfinite(learning_rate), "TrainConfig: bad learning rate");
        detail::require(label_dropout >= 0.0 && label_dropout <= 1.0, "TrainConfig: dropout must lie in [0, 1]");
        detail::require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0,
                        "TrainConfig: Adam betas must lie in [0, 1)");
        detail::require(adam_eps > 0.0, "TrainConfig: adam_eps must be positive");
    }
};

class Adam {
  public:
    Adam(const MlpParams& like, const TrainConfig& cfg)
        : m_(like.zeros_like()), v_(like.zeros_like()), cfg_(cfg) {}

    void step(MlpParams& p, const MlpParams& g) {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t_));
        const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
        for (std::size_t k = 0; k < MlpParams::block_count; ++k) {
            Mat& m = m_.block(k);
            Mat& v = v_.block(k);
            const Mat& gk = g.block(k);
            m = b1 * m + (1.0 - b1) * gk;
            v = b2 * v + (1.0 - b2) * gk.cwiseProduct(gk);
            p.block(k).array() -=
                cfg_.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.adam_eps);
        }
    }

  private:
    MlpParams m_;
    MlpParams v_;
    TrainConfig cfg_;
    std::uint64_t t_ = 0;
};

struct TrainResult {
    MlpParams params;
    std::vector<double> losses;  ///< one per step
    std::size_t null_examples = 0;
    std::size_t total_examples = 0;
};

/*!
 * `cfg.steps` Adam updates on fresh batches from `data`. Step k draws its
 * batch and noise from streams keyed by (seed, k), so the run is fully
 * determined by the config. A non-finite loss aborts with the step index.
 */
inline TrainResult train(MlpParams init, const NoiseSchedule& schedule, const DataSource& data,
                         const TrainConfig& cfg) {
    cfg.validate();
    detail::require(init.all_finite(), "train: initial parameters are not finite");
    TrainResult res{std::move(init), {}, 0, 0};
    res.losses.reserve(cfg.steps);
    if (cfg.steps == 0) return res;
    const Mat table = time_embedding_table(schedule.T(), res.params.arch().time_dim);
    Adam opt(res.params, cfg);
    const Stream root(cfg.seed, 0x7261696e);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Stream data_rng = root.split(2 * step);
        Stream noise_rng = root.split(2 * step + 1);
        const Batch b = data.draw(cfg.batch_size, data_rng);
        const NoisedBatch nb = draw_noised_batch(b, schedule, noise_rng, cfg.label_dropout);
        auto [value, grad] = loss_and_gradients_on(res.params, table, schedule, nb);
        if (!std::isfinite(value)) {
            std::ostringstream msg;
            msg << "train: non-finite loss " << value << " at step " << step;
            throw NumericalError(msg.str());
        }
        res.losses.push_back(value);
        res.null_examples += nb.null_count;
        res.total_examples += static_cast<std::size_t>(nb.xt.cols());
        opt.step(res.params, grad);
    }
    return res;
}

}  // namespace dog
