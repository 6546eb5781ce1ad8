#ifndef TMKNET_ERROR_HPP
#define TMKNET_ERROR_HPP

#include <stdexcept>
#include <string>

namespace tmknet {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape, argument or precondition violation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration (kernel sizes, index lists, hyperparameters).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent data on disk or in memory.
class DataError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf, non-SPD input where SPD is required, eigensolver failure, divergence.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Misuse of state (e.g. evaluating with uninitialized running statistics).
class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace tmknet

#endif  // TMKNET_ERROR_HPP
