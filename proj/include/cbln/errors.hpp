#pragma once

#include <stdexcept>
#include <string>

namespace cbln {

// Base of every error thrown by the library. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameter or option value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Misuse of an API contract (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Token id outside the embedding table.
class VocabularyError : public Error {
 public:
  using Error::Error;
};

// Semantically invalid sample (bad ground truth, out-of-range segment).
class DataError : public Error {
 public:
  using Error::Error;
};

// Malformed file on disk.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Numerical failure during optimization.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace cbln
