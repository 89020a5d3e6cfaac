#pragma once

#include <stdexcept>
#include <string>

namespace megatron {

/// Root of the error hierarchy. Each subclass maps to one failure category so
/// callers (and the CLI exit-code map) can dispatch on type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes disagree with each other or with a model configuration.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Caller supplied an argument outside the operation's domain.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A call violated an interface contract (e.g. gradients requested but absent).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Attention diffusion area exceeds the permitted size relative to the trigger.
class BoundError : public Error {
 public:
  using Error::Error;
};

/// Iterative optimisation produced a non-finite value.
class OptimizationError : public Error {
 public:
  using Error::Error;
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

/// Configuration document failed to parse or validate.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A required on-disk artifact is missing, unreadable or fails its hash check.
class ArtifactError : public Error {
 public:
  ArtifactError(std::string artifact, const std::string& what)
      : Error(what), artifact_(std::move(artifact)) {}
  const std::string& artifact() const noexcept { return artifact_; }

 private:
  std::string artifact_;
};

/// Refusal to overwrite existing outputs without an explicit force flag.
class OverwriteError : public Error {
 public:
  using Error::Error;
};

}  // namespace megatron
