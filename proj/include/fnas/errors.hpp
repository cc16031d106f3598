#pragma once

#include <stdexcept>
#include <string>

namespace fnas {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters, registries or mode payloads.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Bad data handed to an operation (e.g. a label outside [0, K)).
class InputError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. calling backward on a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf detected in a loss or an edge output.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary input (IDX, CIFAR, checkpoint).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Malformed text input; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Structurally well-formed value that breaks a domain invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace fnas
