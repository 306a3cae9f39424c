#pragma once

#include <stdexcept>
#include <string>

namespace vialguard {

// Invalid geometric input: degenerate or non-finite boxes.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Invalid configuration values (anchors, network, generator, policy).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Tensor or array shapes that disagree with a contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Caller violated a documented precondition (e.g. unsorted ranking).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingFileError : public LoadError {
 public:
  using LoadError::LoadError;
};

class ParseError : public LoadError {
 public:
  using LoadError::LoadError;
};

class OutOfBoundsError : public LoadError {
 public:
  using LoadError::LoadError;
};

class RecipeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class SplitError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Unreadable checkpoint or one whose config differs from the expected model.
class CheckpointError : public LoadError {
 public:
  using LoadError::LoadError;
};

// Non-finite values encountered during training.
class TrainingFault : public std::runtime_error {
 public:
  TrainingFault(const std::string& what, long batch_index)
      : std::runtime_error(what), batch_index_(batch_index) {}

  long batch_index() const noexcept { return batch_index_; }

 private:
  long batch_index_;
};

}  // namespace vialguard
