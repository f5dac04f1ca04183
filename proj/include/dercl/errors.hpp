#pragma once

#include <stdexcept>
#include <string>

namespace dercl {

/// Base of every error this library throws. `kind()` is the stable
/// machine-readable tag the CLI reports.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

/// Mismatched matrix shapes between collaborating objects.
class ShapeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "shape"; }
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "contract"; }
};

/// Malformed or missing input files.
class IngestionError : public Error {
 public:
  IngestionError(const std::string& path, const std::string& what)
      : Error(path + ": " + what), path_(path) {}
  const char* kind() const noexcept override { return "ingestion"; }
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Invalid experiment or method configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config"; }
};

/// Raised by the replay buffer when asked to sample while empty.
class EmptyBufferError : public Error {
 public:
  EmptyBufferError() : Error("no replay available: buffer is empty") {}
  const char* kind() const noexcept override { return "empty_buffer"; }
};

}  // namespace dercl
