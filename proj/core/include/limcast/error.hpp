#pragma once

#include <stdexcept>
#include <string>

namespace limcast {

/// Broad failure classes. The CLI maps each one onto a process exit code.
enum class ErrorKind { config, data, numerical };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

/// Malformed or inconsistent input data. `field` names the offending item
/// (a header field, a coordinate axis, a partition, ...).
class DataError : public Error {
 public:
  DataError(std::string field, const std::string& what)
      : Error(ErrorKind::data, field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ErrorKind::numerical, what) {}
};

class InstabilityError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class BranchAmbiguityError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class ConditioningError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DivergenceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace limcast
