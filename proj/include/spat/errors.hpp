#pragma once

#include <stdexcept>
#include <string>

namespace spat {

// Base for every error raised by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or an axis out of range.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered, or a training run diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A caller broke a precondition (non-scalar loss, double prune, empty data, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid user configuration: bad alpha, inconsistent dimensions, bad split counts.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed input file. Row and column are 1-based; 0 means "not applicable".
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t row, std::size_t column)
      : Error(what), row_(row), column_(column) {}

  std::size_t row() const noexcept { return row_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::size_t column_;
};

}  // namespace spat
