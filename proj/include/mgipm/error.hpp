#pragma once

#include <stdexcept>
#include <string>

namespace mgipm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid arguments, mismatched shapes or levels, malformed configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An iterative or direct inner solve failed (breakdown, divergence, factorization).
class SolverError : public Error {
 public:
  using Error::Error;
};

/// An interior point iterate left the strictly feasible region.
class FeasibilityError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ConfigError(what);
}

}  // namespace detail
}  // namespace mgipm
