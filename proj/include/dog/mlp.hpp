// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dog/denoiser.hpp"
#include "dog/error.hpp"
#include "dog/linalg.hpp"
#include "dog/rng.hpp"
#include "dog/schedule.hpp"

namespace dog {

enum class Parameterization { epsilon, score };

inline std::string_view to_string(Parameterization p) {
    return p == Parameterization::epsilon ? "epsilon" : "score";
}

inline Parameterization parameterization_from_string(std::string_view s) {
    if (s == "epsilon" || s == "eps") return Parameterization::epsilon;
    if (s == "score") return Parameterization::score;
    throw InvalidInput("unknown parameterization '" + std::string(s) + "'");
}

//---------------------------------------------------------------------------//
/*!
 * Sinusoidal embedding of a timestep: entries (2k, 2k+1) hold
 * (sin(t / w_k), cos(t / w_k)) with w_k = 10^4^(k / (dim/2 - 1)), so the
 * periods run geometrically from 1 to 10^4.
 */
inline Vec time_embedding(double t, int dim) {
    detail::require(dim >= 2 && dim % 2 == 0, "time_embedding: dim must be even and positive");
    const int half = dim / 2;
    Vec e(dim);
    for (int k = 0; k < half; ++k) {
        const double expo = half == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(half - 1);
        const double w = std::pow(1.0e4, expo);
        e[2 * k] = std::sin(t / w);
        e[2 * k + 1] = std::cos(t / w);
    }
    return e;
}

/// Columns hold time_embedding(t, dim) for t = 0..T.
inline Mat time_embedding_table(int T, int dim) {
    Mat table(dim, T + 1);
    for (int t = 0; t <= T; ++t) table.col(t) = time_embedding(t, dim);
    return table;
}

//---------------------------------------------------------------------------//
// Parameters
//---------------------------------------------------------------------------//

struct MlpArch {
    int dim = 2;
    int hidden = 64;
    int time_dim = 64;
    int class_count = 2;  ///< the class table has class_count + 1 rows; the last is NULL
    Parameterization parameterization = Parameterization::epsilon;

    friend bool operator==(const MlpArch&, const MlpArch&) = default;
};

/*!
 * Weights of the 4-layer ReLU network. Blocks, in declared (and serialized)
 * order:
 *
 *   layer0..layer3 weight/bias   dense layers d->H, H->H, H->H, H->d
 *   time_proj0..2                embedding -> H, one per hidden layer
 *   class_embedding              (class_count + 1) x H, row class_count = NULL
 *
 * Biases are stored as single-column matrices.
 */
class MlpParams {
  public:
    enum Block : std::size_t {
        w0, b0, w1, b1, w2, b2, w3, b3, t0, t1, t2, class_table, block_count
    };

    static constexpr std::array<std::string_view, block_count> names = {
        "layer0.weight", "layer0.bias", "layer1.weight", "layer1.bias",
        "layer2.weight", "layer2.bias", "layer3.weight", "layer3.bias",
        "time_proj0",    "time_proj1",  "time_proj2",    "class_embedding"};

    MlpParams() = default;

    /// All-zero parameters of the given architecture.
    explicit MlpParams(const MlpArch& arch) : arch_(arch) {
        detail::require(arch.dim >= 1 && arch.hidden >= 1 && arch.class_count >= 0,
                        "MlpParams: invalid architecture");
        detail::require(arch.time_dim >= 2 && arch.time_dim % 2 == 0, "MlpParams: time_dim must be even");
        for (std::size_t b = 0; b < block_count; ++b) {
            const auto [r, c] = shape(arch, static_cast<Block>(b));
            blocks_[b] = Mat::Zero(r, c);
        }
    }

    static std::pair<Eigen::Index, Eigen::Index> shape(const MlpArch& a, Block b) {
        const Eigen::Index h = a.hidden, d = a.dim, e = a.time_dim;
        switch (b) {
            case w0: return {h, d};
            case w1: case w2: return {h, h};
            case w3: return {d, h};
            case b0: case b1: case b2: return {h, 1};
            case b3: return {d, 1};
            case t0: case t1: case t2: return {h, e};
            case class_table: return {a.class_count + 1, h};
            default: break;
        }
        throw InvalidInput("MlpParams: bad block");
    }

    [[nodiscard]] const MlpArch& arch() const noexcept { return arch_; }
    [[nodiscard]] Mat& operator[](Block b) { return blocks_[b]; }
    [[nodiscard]] const Mat& operator[](Block b) const { return blocks_[b]; }
    [[nodiscard]] Mat& block(std::size_t b) { return blocks_.at(b); }
    [[nodiscard]] const Mat& block(std::size_t b) const { return blocks_.at(b); }

    [[nodiscard]] std::size_t size() const {
        std::size_t n = 0;
        for (const auto& m : blocks_) n += static_cast<std::size_t>(m.size());
        return n;
    }

    [[nodiscard]] bool all_finite() const {
        for (const auto& m : blocks_)
            if (!m.allFinite()) return false;
        return true;
    }

    [[nodiscard]] double squared_norm() const {
        double s = 0.0;
        for (const auto& m : blocks_) s += m.squaredNorm();
        return s;
    }

    /// Zero parameters with the same shapes.
    [[nodiscard]] MlpParams zeros_like() const { return MlpParams(arch_); }

    /// Row index into the class table for a condition.
    [[nodiscard]] Eigen::Index class_row(ClassId c) const {
        if (!c) return arch_.class_count;
        if (*c < 0 || *c >= arch_.class_count)
            throw InvalidInput("MLP: unknown class id " + std::to_string(*c));
        return *c;
    }

    friend bool operator==(const MlpParams& a, const MlpParams& b) {
        if (!(a.arch_ == b.arch_)) return false;
        for (std::size_t i = 0; i < block_count; ++i)
            if (a.blocks_[i].rows() != b.blocks_[i].rows() ||
                a.blocks_[i].cols() != b.blocks_[i].cols() || a.blocks_[i] != b.blocks_[i])
                return false;
        return true;
    }

  private:
    MlpArch arch_;
    std::array<Mat, block_count> blocks_;
};

/*!
 * He-uniform weights for the three hidden layers, U(+-1/sqrt(E)) for the time
 * projections, zeros for biases, the class table and the output layer. The
 * zero head makes a fresh network predict eps = 0 everywhere.
 */
inline MlpParams init_params(const MlpArch& arch, std::uint64_t seed) {
    MlpParams p(arch);
    Stream rng(seed, 0x1417);
    auto fill = [&](Mat& m, double bound) {
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-bound, bound);
    };
    fill(p[MlpParams::w0], std::sqrt(6.0 / arch.dim));
    fill(p[MlpParams::w1], std::sqrt(6.0 / arch.hidden));
    fill(p[MlpParams::w2], std::sqrt(6.0 / arch.hidden));
    const double tb = 1.0 / std::sqrt(static_cast<double>(arch.time_dim));
    fill(p[MlpParams::t0], tb);
    fill(p[MlpParams::t1], tb);
    fill(p[MlpParams::t2], tb);
    return p;
}

//---------------------------------------------------------------------------//
// Forward and backward passes on a column batch (features x batch).
//---------------------------------------------------------------------------//

/// Intermediate values kept for the backward pass.
struct MlpTape {
    Mat x;                        ///< d x B
    Mat temb;                     ///< E x B
    std::vector<Eigen::Index> rows;  ///< class-table row per column
    Vec scale;                    ///< per-column output scale (1, or -sqrt(1 - abar) for score models)
    std::array<Mat, 3> pre;       ///< hidden pre-activations
    std::array<Mat, 3> act;       ///< ReLU outputs
    Mat out;                      ///< d x B eps predictions
};

namespace detail {

inline Mat class_columns(const MlpParams& p, const std::vector<Eigen::Index>& rows) {
    const Mat& table = p[MlpParams::class_table];
    Mat c(table.cols(), static_cast<Eigen::Index>(rows.size()));
    for (std::size_t j = 0; j < rows.size(); ++j)
        c.col(static_cast<Eigen::Index>(j)) = table.row(rows[j]).transpose();
    return c;
}

}  // namespace detail

/*!
 * eps predictions for a batch. `x` is d x B, `temb` is E x B, `rows` selects
 * the class-table row and `scale` converts the raw head output to eps.
 */
inline void mlp_forward(const MlpParams& p, MlpTape& tape) {
    using B = MlpParams;
    const Eigen::Index n = tape.x.cols();
    const Mat cls = detail::class_columns(p, tape.rows);
    const std::array<B::Block, 3> ws{B::w0, B::w1, B::w2};
    const std::array<B::Block, 3> bs{B::b0, B::b1, B::b2};
    const std::array<B::Block, 3> ts{B::t0, B::t1, B::t2};
    for (std::size_t l = 0; l < 3; ++l) {
        const Mat& in = l == 0 ? tape.x : tape.act[l - 1];
        Mat z = p[ws[l]] * in;
        z.noalias() += p[ts[l]] * tape.temb;
        z.colwise() += p[bs[l]].col(0);
        z += cls;
        tape.act[l] = z.cwiseMax(0.0);
        tape.pre[l] = std::move(z);
    }
    Mat raw = p[B::w3] * tape.act[2];
    raw.colwise() += p[B::b3].col(0);
    for (Eigen::Index j = 0; j < n; ++j) raw.col(j) *= tape.scale[j];
    tape.out = std::move(raw);
}

/// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(out).
inline void mlp_backward(const MlpParams& p, const MlpTape& tape, const Mat& d_out, MlpParams& grad) {
    using B = MlpParams;
    const Eigen::Index n = tape.x.cols();
    Mat d_raw = d_out;
    for (Eigen::Index j = 0; j < n; ++j) d_raw.col(j) *= tape.scale[j];
    grad[B::w3].noalias() += d_raw * tape.act[2].transpose();
    grad[B::b3].col(0) += d_raw.rowwise().sum();
    Mat d_act = p[B::w3].transpose() * d_raw;

    const std::array<B::Block, 3> ws{B::w0, B::w1, B::w2};
    const std::array<B::Block, 3> bs{B::b0, B::b1, B::b2};
    const std::array<B::Block, 3> ts{B::t0, B::t1, B::t2};
    Mat& table = grad[B::class_table];
    for (std::size_t k = 3; k-- > 0;) {
        Mat d_pre = (tape.pre[k].array() > 0.0).select(d_act, 0.0);
        const Mat& in = k == 0 ? tape.x : tape.act[k - 1];
        grad[ws[k]].noalias() += d_pre * in.transpose();
        grad[bs[k]].col(0) += d_pre.rowwise().sum();
        grad[ts[k]].noalias() += d_pre * tape.temb.transpose();
        for (Eigen::Index j = 0; j < n; ++j)
            table.row(tape.rows[static_cast<std::size_t>(j)]) += d_pre.col(j).transpose();
        if (k > 0) d_act = p[ws[k]].transpose() * d_pre;
    }
}

//---------------------------------------------------------------------------//
/*!
 * The trainable network as a Denoiser. Holds its parameters and the schedule
 * it was trained against; score-parameterized networks are converted to eps
 * internally.
 */
class MlpDenoiser final : public Denoiser {
  public:
    MlpDenoiser(MlpParams params, NoiseSchedule schedule)
        : params_(std::move(params)),
          schedule_(std::move(schedule)),
          table_(time_embedding_table(schedule_.T(), params_.arch().time_dim)) {}

    [[nodiscard]] Eigen::Index dim() const override { return params_.arch().dim; }
    [[nodiscard]] const NoiseSchedule& schedule() const override { return schedule_; }
    [[nodiscard]] int class_count() const override { return params_.arch().class_count; }
    [[nodiscard]] const MlpParams& params() const noexcept { return params_; }
    [[nodiscard]] const Mat& embedding_table() const noexcept { return table_; }

    [[nodiscard]] PointSet eps_batch(const PointSet& x, int t, ClassId c) const override {
        check_inputs(x, t, c);
        const Eigen::Index n = x.rows();
        MlpTape tape;
        tape.x = x.transpose();
        tape.temb = table_.col(t).replicate(1, n);
        tape.rows.assign(static_cast<std::size_t>(n), params_.class_row(c));
        tape.scale = Vec::Constant(n, output_scale(t));
        mlp_forward(params_, tape);
        return tape.out.transpose();
    }

    [[nodiscard]] double output_scale(int t) const {
        return output_scale(params_.arch().parameterization, schedule_, t);
    }

    static double output_scale(Parameterization p, const NoiseSchedule& s, int t) {
        return p == Parameterization::epsilon ? 1.0 : -std::sqrt(1.0 - s.abar(t));
    }

  private:
    MlpParams params_;
    NoiseSchedule schedule_;
    Mat table_;
};

}  // namespace dog
