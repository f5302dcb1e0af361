#pragma once

#include <stdexcept>
#include <string>

namespace ttav {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or lengths that do not satisfy an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf reached a value that must stay finite.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// An argument outside its admissible domain (σ ≤ 0, eps out of range, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or version-incompatible file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration, or a configuration that conflicts with a checkpoint.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace ttav
