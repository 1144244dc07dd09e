#pragma once

#include <stdexcept>
#include <string>

namespace sbstack {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inputs whose shapes disagree (dimension, draw count, row count).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A scalar parameter outside its admissible range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Objective or option combination that cannot run on the given inputs.
class ConfigurationError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent file contents.
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// Requested more draws than a pool can supply.
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// Evaluation requested on an empty split.
class EvaluationError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss, failed factorization, diverging solver.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace sbstack
