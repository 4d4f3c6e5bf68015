#pragma once

#include <stdexcept>
#include <string>

namespace cookie {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or axis mismatch.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Precondition violated by the caller (N < 2, tau <= 0, empty mask, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data.
class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
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

class BenchmarkError : public Error {
 public:
  using Error::Error;
};

/// Raised by gradient checking when an intermediate value stops being finite.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace cookie
