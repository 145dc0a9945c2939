#pragma once

#include <stdexcept>
#include <string>

namespace cllm {

// All library failures derive from Error so callers (notably the CLI) can map
// them onto exit codes without catching std::exception wholesale.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// A caller broke a documented precondition.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Sequence would exceed the model's max_seq_len.
class CapacityError : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

// Raised when an internal invariant fails; indicates a bug, not bad input.
class InvariantFailure : public Error {
 public:
  using Error::Error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractViolation(what);
}

}  // namespace cllm
