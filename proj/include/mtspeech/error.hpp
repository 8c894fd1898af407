#pragma once

#include <stdexcept>
#include <string>

namespace mtspeech {

// Base class for everything thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration or arguments; detected before any compute starts.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input files (manifests, vocab, audio, checkpoints).
class DataError : public Error {
 public:
  using Error::Error;
};

// Incompatible tensor shapes fed to a primitive.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, diverging optimization, or other numeric faults.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A target sequence that admits no alignment lattice (distinct from numeric failure).
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

}  // namespace mtspeech
