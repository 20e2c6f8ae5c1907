#pragma once

#include <stdexcept>
#include <string>

namespace disdyn {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Tensor or window shapes that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or inconsistent files on disk.
class IoError : public Error {
 public:
  using Error::Error;
};

/// ODE integration failure; carries the simulated time at which it failed.
class IntegrationError : public Error {
 public:
  IntegrationError(const std::string& what, double time)
      : Error(what + " (t=" + std::to_string(time) + ")"), time_(time) {}

  [[nodiscard]] double time() const noexcept { return time_; }

 private:
  double time_;
};

/// Coincident bodies in the 3-body right-hand side.
class SingularityError : public DomainError {
 public:
  using DomainError::DomainError;
};

}  // namespace disdyn
