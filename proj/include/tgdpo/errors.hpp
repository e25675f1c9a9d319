#pragma once

#include <stdexcept>
#include <string>

namespace tgdpo {

// Bad inputs or violated preconditions (unknown task, duplicate symbol, ...).
class ValidationError : public std::runtime_error {
public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// Mutation of a frozen policy, or gradients requested from one.
class ContractError : public std::runtime_error {
public:
  explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

// An exact check would exceed its enumeration budget. Never downgraded to
// sampling: the brute-force oracles certify exactness or refuse to run.
class CapacityError : public std::runtime_error {
public:
  explicit CapacityError(const std::string& what) : std::runtime_error(what) {}
};

// An exponent left the representable range. Raised instead of saturating so
// theorem checks cannot pass on clipped arithmetic.
class NumericalRangeError : public std::runtime_error {
public:
  explicit NumericalRangeError(const std::string& what) : std::runtime_error(what) {}
};

// A file could not be opened, read, or written.
class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Training produced a non-finite loss; carries the offending step.
class TrainingError : public std::runtime_error {
public:
  TrainingError(const std::string& what, int step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  int step() const { return step_; }

private:
  int step_;
};

}  // namespace tgdpo
