#pragma once

#include <stdexcept>
#include <string>

namespace spurlens {

/// Base of every error the library raises. The CLI maps IoError to exit
/// code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition of an operation was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or incompatible binary container.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ArchitectureError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Operation not available for this model family.
class FamilyError : public Error {
 public:
  using Error::Error;
};

class SpecError : public Error {
 public:
  using Error::Error;
};

class SplitError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace spurlens
