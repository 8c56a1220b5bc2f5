#pragma once

#include <stdexcept>
#include <string>

namespace shiftshare {

/// Input violates a documented precondition (bad file, negative share, ...).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A required column is missing from an input table.
class SchemaError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// The numbers are valid but the requested quantity cannot be computed
/// (rank deficiency, zero first stage, bracket failure, ...).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace shiftshare
