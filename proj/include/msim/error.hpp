#pragma once

#include <stdexcept>
#include <string>

namespace msim {

/// Broad failure class; the CLI maps each to a distinct exit code.
enum class ErrorKind { config, data, numerical };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

struct DataError : Error {
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

struct IoError : DataError {
  using DataError::DataError;
};

/// Malformed TensorFile or manifest.
struct FormatError : DataError {
  using DataError::DataError;
};

struct DimensionMismatch : DataError {
  using DataError::DataError;
};

struct EmptyDataset : DataError {
  using DataError::DataError;
};

/// No trajectory reaches the paddle within the frame cap.
struct GenerationError : DataError {
  using DataError::DataError;
};

struct InsufficientContext : DataError {
  using DataError::DataError;
};

struct AlignmentError : DataError {
  using DataError::DataError;
};

struct NumericalError : Error {
  explicit NumericalError(const std::string& what) : Error(ErrorKind::numerical, what) {}
};

}  // namespace msim
