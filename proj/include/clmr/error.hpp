#pragma once

#include <stdexcept>
#include <string>

namespace clmr {

/// Base of every error raised by the library. `kind()` is a stable token
/// used in machine-readable CLI output.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& message) : std::runtime_error(message) {}
  virtual const char* kind() const noexcept { return "error"; }
};

/// A configuration value violates its documented invariant.
class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config"; }
};

/// Tensor or buffer shapes disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "shape"; }
};

/// A value outside its admissible domain (label out of range, degenerate batch...).
class DomainError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "domain"; }
};

/// Backward was requested on something that cannot be differentiated.
class GraphError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "graph"; }
};

/// NaN or infinity where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numeric"; }
};

/// A file does not follow the expected on-disk format.
class FormatError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "format"; }
};

/// A file ends before its declared payload.
class CorruptFileError : public FormatError {
 public:
  using FormatError::FormatError;
  const char* kind() const noexcept override { return "corrupt"; }
};

/// Filesystem failure (unreadable or unwritable path).
class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io"; }
};

}  // namespace clmr
