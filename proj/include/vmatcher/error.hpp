#pragma once

#include <stdexcept>
#include <string>

namespace vmatcher {

/// Base class of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid model or layer configuration (odd widths, bad head counts, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required (exit code 2 in the CLI).
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace vmatcher
