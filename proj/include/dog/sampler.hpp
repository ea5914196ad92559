// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dog/denoiser.hpp"
#include "dog/error.hpp"
#include "dog/guidance.hpp"
#include "dog/linalg.hpp"
#include "dog/rng.hpp"
#include "dog/schedule.hpp"

namespace dog {

/*!
 * Deterministic (eta = 0) DDIM transition from noise level abar_t to the
 * less noisy abar_prev:
 *
 *   x0_hat = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)
 *   x_prev = sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev) eps
 */
template <class X, class E>
auto ddim_step(const Eigen::MatrixBase<X>& x_t, const Eigen::MatrixBase<E>& eps_hat, double abar_t,
               double abar_prev) {
    using Out = Eigen::Matrix<typename X::Scalar, X::RowsAtCompileTime, X::ColsAtCompileTime>;
    detail::require(abar_t > 0.0 && abar_t <= 1.0 && abar_prev > 0.0 && abar_prev <= 1.0,
                    "ddim_step: abar values must lie in (0, 1]");
    detail::require(abar_prev >= abar_t, "ddim_step: abar_prev must not be below abar_t");
    if (x_t.rows() != eps_hat.rows() || x_t.cols() != eps_hat.cols())
        throw InvalidInput("ddim_step: dimension mismatch");
    if (abar_prev == abar_t) return Out(x_t);
    const Out x0 = (x_t - std::sqrt(1.0 - abar_t) * eps_hat) / std::sqrt(abar_t);
    return Out(std::sqrt(abar_prev) * x0 + std::sqrt(1.0 - abar_prev) * eps_hat);
}

struct TrajectoryState {
    int timestep;
    Vec x;
};

struct Trajectory {
    std::size_t chain = 0;
    std::vector<TrajectoryState> states;  ///< from x_T down to the clean sample (timestep 0)
    std::uint64_t seed = 0;
    std::string guidance;

    [[nodiscard]] const Vec& terminal() const { return states.back().x; }
};

struct SampleRequest {
    int steps = 20;
    std::size_t n = 1;
    ClassId c = null_class;
    std::uint64_t seed = 0;
    bool record = false;
    std::size_t first_chain = 0;  ///< global id of the first chain; chain i uses stream (seed, first_chain + i)
};

struct SampleResult {
    PointSet samples;  ///< n x d
    std::vector<Trajectory> trajectories;
};

/// x_T for one chain, drawn from the chain's own stream.
inline Vec initial_state(std::uint64_t seed, std::size_t chain, Eigen::Index dim) {
    Stream rng(seed, chain);
    Vec x(dim);
    for (Eigen::Index j = 0; j < dim; ++j) x[j] = rng.normal();
    return x;
}

/*!
 * Runs `req.n` independent DDIM chains under `spec`. Each chain starts from
 * its own stream; all chains are advanced together, one guided evaluation per
 * step, and the final transition maps straight to x0_hat (abar_prev = 1).
 */
inline SampleResult sample(const GuidanceSpec& spec, const SampleRequest& req) {
    spec.validate();
    detail::require(req.steps >= 1, "sample: steps must be at least 1");
    detail::require(req.n >= 1, "sample: n must be at least 1");
    const NoiseSchedule& sched = spec.conditional->schedule();
    const Eigen::Index d = spec.conditional->dim();
    const Eigen::Index n = static_cast<Eigen::Index>(req.n);
    const std::vector<int> ts = timestep_subsequence(sched.T(), req.steps);

    PointSet x(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
        x.row(i) = initial_state(req.seed, req.first_chain + static_cast<std::size_t>(i), d).transpose();

    SampleResult res;
    const std::string desc = spec.describe();
    if (req.record) {
        res.trajectories.resize(req.n);
        for (std::size_t i = 0; i < req.n; ++i) {
            auto& tr = res.trajectories[i];
            tr.chain = req.first_chain + i;
            tr.seed = req.seed;
            tr.guidance = desc;
            tr.states.reserve(ts.size() + 1);
            tr.states.push_back({ts.front(), x.row(static_cast<Eigen::Index>(i)).transpose()});
        }
    }

    for (std::size_t k = 0; k < ts.size(); ++k) {
        const int t = ts[k];
        const int t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
        const PointSet eps = guided_eps_batch(spec, x, t, req.c);
        x = ddim_step(x, eps, sched.abar(t), sched.abar(t_prev));
        for (Eigen::Index i = 0; i < n; ++i) {
            if (!x.row(i).allFinite()) {
                throw NumericalError("sample: non-finite state in chain " +
                                     std::to_string(req.first_chain + static_cast<std::size_t>(i)) +
                                     " at step " + std::to_string(k) + " (t=" + std::to_string(t) + ")");
            }
        }
        if (req.record)
            for (Eigen::Index i = 0; i < n; ++i)
                res.trajectories[static_cast<std::size_t>(i)].states.push_back({t_prev, x.row(i).transpose()});
    }
    res.samples = std::move(x);
    return res;
}

//---------------------------------------------------------------------------//
// CSV export
//---------------------------------------------------------------------------//

namespace detail {

inline void write_coords(std::FILE* f, const Eigen::Ref<const Vec>& x) {
    for (Eigen::Index j = 0; j < x.size(); ++j) std::fprintf(f, ",%.17g", x[j]);
    std::fputc('\n', f);
}

inline void coord_header(std::FILE* f, Eigen::Index d) {
    for (Eigen::Index j = 0; j < d; ++j) std::fprintf(f, ",x%td", static_cast<std::ptrdiff_t>(j));
    std::fputc('\n', f);
}

struct FileCloser {
    void operator()(std::FILE* f) const noexcept {
        if (f) std::fclose(f);
    }
};

inline std::unique_ptr<std::FILE, FileCloser> open_write(const std::string& path) {
    std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "w"));
    if (!f) throw Error("cannot open " + path + " for writing");
    return f;
}

}  // namespace detail

/// Columns: chain,class,x0..x{d-1}. `labels` may be empty (written as "null").
inline void write_samples_csv(const std::string& path, const PointSet& samples,
                              const std::vector<ClassId>& labels = {}) {
    auto f = detail::open_write(path);
    std::fprintf(f.get(), "chain,class");
    detail::coord_header(f.get(), samples.cols());
    for (Eigen::Index i = 0; i < samples.rows(); ++i) {
        const auto iu = static_cast<std::size_t>(i);
        if (iu < labels.size() && labels[iu])
            std::fprintf(f.get(), "%td,%d", static_cast<std::ptrdiff_t>(i), *labels[iu]);
        else
            std::fprintf(f.get(), "%td,null", static_cast<std::ptrdiff_t>(i));
        detail::write_coords(f.get(), samples.row(i).transpose());
    }
}

/// Columns: chain,step,timestep,x0..x{d-1}; one row per recorded state.
inline void write_trajectories_csv(const std::string& path, const std::vector<Trajectory>& trajectories) {
    auto f = detail::open_write(path);
    const Eigen::Index d = trajectories.empty() ? 0 : trajectories.front().states.front().x.size();
    std::fprintf(f.get(), "chain,step,timestep");
    detail::coord_header(f.get(), d);
    for (const auto& tr : trajectories)
        for (std::size_t s = 0; s < tr.states.size(); ++s) {
            std::fprintf(f.get(), "%zu,%zu,%d", tr.chain, s, tr.states[s].timestep);
            detail::write_coords(f.get(), tr.states[s].x);
        }
}

}  // namespace dog
