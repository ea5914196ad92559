// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

namespace dog {

namespace detail {

// SplitMix64 finalizer: a bijective 64-bit mixing function.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t golden_gamma = 0x9e3779b97f4a7c15ULL;

}  // namespace detail

//---------------------------------------------------------------------------//
/*!
 * Counter-based random stream.
 *
 * Output n of a stream is a pure function mix64(key + n * gamma), so a stream
 * is fully described by its 64-bit key and position. Child streams are keyed
 * by hashing (parent key, child id); two streams derived from the same
 * parent with different ids never share state, and results do not depend on
 * the order in which streams are consumed.
 *
 * Normal and uniform variates are generated here rather than through
 * <random> distributions so that output is identical across standard
 * library implementations.
 */
class Stream {
  public:
    using result_type = std::uint64_t;

    explicit constexpr Stream(std::uint64_t seed) noexcept
        : key_(detail::mix64(seed ^ 0x6a09e667f3bcc909ULL)) {}

    constexpr Stream(std::uint64_t seed, std::uint64_t id) noexcept
        : Stream(Stream(seed).split(id)) {}

    /// Independent child stream; does not advance this stream.
    [[nodiscard]] constexpr Stream split(std::uint64_t id) const noexcept {
        Stream child;
        child.key_ = detail::mix64(key_ ^ detail::mix64(id + detail::golden_gamma));
        return child;
    }

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept {
        return std::numeric_limits<result_type>::max();
    }

    constexpr result_type operator()() noexcept {
        return detail::mix64(key_ + (++counter_) * detail::golden_gamma);
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() noexcept {
        return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
    }

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n) by rejection; n must be positive.
    std::uint64_t below(std::uint64_t n) noexcept {
        const std::uint64_t limit = max() - max() % n;
        std::uint64_t v;
        do {
            v = (*this)();
        } while (v >= limit);
        return v % n;
    }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    /// Standard normal via Box-Muller; caches the second variate.
    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    [[nodiscard]] constexpr std::uint64_t key() const noexcept { return key_; }
    [[nodiscard]] constexpr std::uint64_t position() const noexcept { return counter_; }

  private:
    constexpr Stream() noexcept = default;

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace dog
