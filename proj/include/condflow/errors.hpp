// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace condflow {

// Shapes of operands are incompatible (broadcast, conv channels, ...).
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// A value is outside the mathematical domain of an operation
// (log of a nonpositive number, division by exact zero, out-of-range labels).
class DomainError : public std::runtime_error {
 public:
  explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// A configuration is structurally invalid (odd channel count for a coupling
// split, missing conditioning features, bad run-config field).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// A computation produced NaN/Inf or otherwise left the numeric contract.
// The message names the first offending layer where known.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// A matrix that must be invertible is (numerically) singular.
class SingularError : public std::runtime_error {
 public:
  explicit SingularError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace condflow
