#pragma once

#include <stdexcept>
#include <string>

namespace compat {

// Invalid architecture descriptors, shape mismatches at build time, bad
// method/flag combinations.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed runtime inputs (out-of-range labels, empty image sets).
class InputError : public std::runtime_error {
 public:
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse (backward on a non-scalar, reading undefined tensors).
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training-time failure; carries the step at which it happened.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& msg, long step)
      : std::runtime_error(msg + " (step " + std::to_string(step) + ")"),
        step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// Checkpoint / dataset-cache container problems: bad magic, version
// mismatch, truncation, digest mismatch.
class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

// Recombination with mismatched interface channel counts.
class InterfaceError : public std::runtime_error {
 public:
  explicit InterfaceError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace compat
