#pragma once

#include <stdexcept>
#include <string>

namespace tacbrac {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An index or argument outside its mathematical domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid distribution parameters (e.g. covariance not positive definite).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent configuration: meshes that do not match a support, bad keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Rejection sampling could not make progress.
class SamplingError : public Error {
 public:
  using Error::Error;
};

/// A numerical failure such as a singular generator.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Dimension mismatch between a model and the data fed to it.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file. The message carries the offending line number.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  explicit ParseError(const std::string& what) : Error(what), line_(0) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Data that parsed but cannot be used for the requested stage.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A model that cannot produce output (all-zero kernels and the like).
class ModelError : public Error {
 public:
  using Error::Error;
};

/// A fit that could not reduce its objective from any start.
class FitError : public Error {
 public:
  using Error::Error;
};

}  // namespace tacbrac
