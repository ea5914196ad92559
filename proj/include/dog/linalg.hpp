// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <string>

#include "dog/error.hpp"

namespace dog {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// A set of points stored one per row.
using PointSet = Eigen::MatrixXd;

namespace detail {

inline void require_dim(Eigen::Index got, Eigen::Index want, const char* what) {
    if (got != want) {
        throw InvalidInput(std::string(what) + ": dimension mismatch (expected " +
                           std::to_string(want) + ", got " + std::to_string(got) + ")");
    }
}

inline bool all_finite(const Eigen::Ref<const Mat>& m) { return m.allFinite(); }

}  // namespace detail
}  // namespace dog
