#pragma once

#include <stdexcept>
#include <string>

namespace vssd {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A configuration the kernels do not support (even kernel, odd head split, ...).
class UnsupportedConfiguration : public Error {
 public:
  using Error::Error;
};

/// Parameter outside its mathematical domain (e.g. a non-negative continuous A).
class ParameterDomainError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

class ResourceError : public Error {
 public:
  using Error::Error;
};

class InternalConsistencyError : public Error {
 public:
  using Error::Error;
};

}  // namespace vssd
