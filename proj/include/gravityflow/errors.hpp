#pragma once

#include <stdexcept>
#include <string>

namespace gravityflow {

// Shapes disagree (matmul inner extents, elementwise operands, loss inputs).
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of an operation.
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// Invalid hyperparameter, flag, or option value.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// NaN or infinity produced where finite values are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse, e.g. backward() on a non-scalar node.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

struct RangeError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// File-level failures. `kind` distinguishes the failure class so callers can
// report them separately.
struct IoError : std::runtime_error {
  enum class Kind { missing_file, corrupt_manifest, truncated, version_mismatch, shape_mismatch, non_finite, write_failed };

  IoError(Kind k, const std::string& what) : std::runtime_error(what), kind(k) {}
  Kind kind;
};

}  // namespace gravityflow
