#pragma once

#include <stdexcept>
#include <string>

namespace fedsl {

/// Invalid or incomplete experiment configuration. Maps to CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File system or format failure. Maps to CLI exit code 3.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Two layout-carrying vectors that were expected to align did not.
class LayoutError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A computation produced NaN or Inf. `op()` names the offending node.
class NumericError : public std::runtime_error {
 public:
  NumericError(std::string op, const std::string& detail)
      : std::runtime_error("non-finite value in '" + op + "': " + detail), op_(std::move(op)) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

}  // namespace fedsl
