#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hem {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Raised by the M-step when a component receives (almost) no responsibility mass.
class DegenerateComponentError : public Error {
 public:
  DegenerateComponentError(std::size_t component, double mass)
      : Error("degenerate component " + std::to_string(component) +
              " (column mass " + std::to_string(mass) + ")"),
        component_(component),
        mass_(mass) {}

  std::size_t component() const noexcept { return component_; }
  double mass() const noexcept { return mass_; }

 private:
  std::size_t component_;
  double mass_;
};

/// A trace, gradient record or config does not belong to the inputs it is used with.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

class OracleError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class UnsupportedVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace hem
