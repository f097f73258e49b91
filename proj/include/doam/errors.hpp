#pragma once

#include <stdexcept>
#include <string>

namespace doam {

// Thrown when a tensor's rank, channel count or spatial extent does not match
// what an operation requires.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed input file. The message carries file and line where known.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised by the training loop when the loss becomes NaN or infinite.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, long batch_index)
      : std::runtime_error(what), batch_index_(batch_index) {}
  long batch_index() const { return batch_index_; }

 private:
  long batch_index_;
};

}  // namespace doam
