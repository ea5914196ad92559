// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dog {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// A caller passed arguments that violate an operation's preconditions.
class InvalidInput : public Error {
  public:
    using Error::Error;
};

/// A file on disk is malformed, truncated, or describes a different model.
class FormatError : public Error {
  public:
    using Error::Error;
};

/// A computation produced NaN or infinity.
class NumericalError : public Error {
  public:
    using Error::Error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
    if (!cond) throw InvalidInput(what);
}

}  // namespace detail
}  // namespace dog
