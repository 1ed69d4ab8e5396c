// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace snip {

/// Precondition violated by a caller-supplied value.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Tensor shapes do not agree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Object used out of sequence (stale cache, mismatched snapshot, ...).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Problem instance too large for an exhaustive method.
class SizeError : public std::length_error {
 public:
  using std::length_error::length_error;
};

/// Malformed file or unsupported schema.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// No assignment satisfies the efficiency constraint. Carries the best
/// efficiency reachable so callers can relax the target.
class InfeasibleError : public std::runtime_error {
 public:
  InfeasibleError(const std::string& what, double max_achievable, int group = -1)
      : std::runtime_error(what), max_achievable_(max_achievable), group_(group) {}

  double max_achievable() const noexcept { return max_achievable_; }
  /// Offending group index for grouped instances, -1 otherwise.
  int group() const noexcept { return group_; }

 private:
  double max_achievable_;
  int group_;
};

}  // namespace snip
