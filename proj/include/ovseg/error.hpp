#pragma once

#include <stdexcept>
#include <string>

namespace ovseg {

// Invalid arguments, shapes, or configuration. CLI exit code 2.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Unreadable or inconsistent input data. CLI exit code 3.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values or degenerate embeddings. CLI exit code 4.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ovseg
