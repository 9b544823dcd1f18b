#pragma once

#include <stdexcept>
#include <string>

namespace infusion {

// Violated precondition or malformed configuration.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

class LookupError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Non-finite value produced or consumed.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingError : public NumericError {
 public:
  TrainingError(const std::string& what, long step)
      : NumericError(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// Stored artifact does not match its recorded hash or is unreadable.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MigrationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace infusion
