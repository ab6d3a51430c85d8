#pragma once

#include <stdexcept>
#include <string>

namespace kflow {

/// Violated precondition (shape mismatch, out-of-range argument, ...).
struct ContractViolation : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// NaN/Inf, divergence, or a numerical routine that failed to converge.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Reverse-mode reached a primitive that has no gradient rule.
struct UnsupportedOp : std::logic_error {
  using std::logic_error::logic_error;
};

/// File or format problems (missing files, bad magic, checksum mismatch).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractViolation(what);
}

}  // namespace kflow
