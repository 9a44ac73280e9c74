#pragma once

#include <stdexcept>
#include <string>

namespace lwd {

/// Base for every error raised by the library. Callers that only care about
/// "user error vs. internal failure" can switch on `is_user_error()`.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual bool is_user_error() const { return false; }
};

/// Bad configuration or hyperparameters (k out of range, unknown sweep key, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
  bool is_user_error() const override { return true; }
};

/// Input data violates a documented invariant (labels out of range, NaN score).
class ValidationError : public Error {
 public:
  using Error::Error;
  bool is_user_error() const override { return true; }
};

/// A file could not be read or parsed. The message always names the path.
class LoadError : public Error {
 public:
  using Error::Error;
  bool is_user_error() const override { return true; }
};

/// Shape or pairing mismatch between objects that must agree.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Optimization diverged or failed its convergence requirement.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Not enough benign data to fit a CDF or a threshold.
class CalibrationError : public Error {
 public:
  using Error::Error;
  bool is_user_error() const override { return true; }
};

}  // namespace lwd
