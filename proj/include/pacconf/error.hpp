#pragma once

#include <stdexcept>
#include <string>

namespace pacconf {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A guarantee cannot be achieved with the data at hand, e.g. the
/// calibration set is too small for the requested (alpha, delta).
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

/// Violated numeric precondition (out-of-range level, empty input, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Parameter layout / tensor shape mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed file or configuration.
class ParseError : public Error {
 public:
  using Error::Error;
};

}  // namespace pacconf
