#pragma once

#include <stdexcept>
#include <string>

namespace angie {

// Malformed input, shape mismatches, invalid files and configs.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-SPD matrices, NaN losses and other numerical breakdowns.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad command-line usage or missing pipeline prerequisites.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace angie
