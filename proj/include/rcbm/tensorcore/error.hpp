#pragma once

#include <stdexcept>
#include <string>

namespace rcbm {

// Every failure surfaced by the library derives from Error. The category
// decides the CLI exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or model dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf in values, losses or gradients.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A metric whose value is undefined for the given input (zero-norm
/// vectors, constant representations, rank-deficient spectra).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration. `field()` names the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// Unreadable, truncated or inconsistent files.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the tape: backward twice, non-scalar loss, unbalanced scopes,
/// checkpoint replay mismatch.
class TapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace rcbm
