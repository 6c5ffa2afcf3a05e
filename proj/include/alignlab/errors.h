// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace alignlab {

/// Input shapes do not satisfy a primitive's shape rule.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A precondition on a value (range, simplex, support) was violated.
class ValueError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A tensor value or gradient came out NaN or infinite.
class NonFiniteError : public ValueError {
 public:
  using ValueError::ValueError;
};

/// A persisted file (checkpoint, config) is malformed or unsupported.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An iterative procedure produced a non-finite value.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::size_t step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace alignlab
