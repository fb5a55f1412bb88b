#pragma once

#include <stdexcept>
#include <string>

namespace duda {

// Base class for every error raised by the library. `kind()` is a stable,
// machine-readable tag used by the CLI error object.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

// Invalid configuration (spec, preset, hyper-parameter, config file).
class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config_error"; }
};

// Malformed input to an operation (shape mismatch, class id out of range).
class InputError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "input_error"; }
};

// Incompatible model structures (architectures or parameter layouts).
class StructuralError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "structural_error"; }
};

// NaN or otherwise non-finite values where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numeric_error"; }
};

// A loss whose mean is taken over zero pixels.
class UndefinedLossError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "undefined_loss"; }
};

// A metric with no present class to average over.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "undefined_metric"; }
};

// Inconsistency profile requested before any class was observed.
class EstimationError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "estimation_error"; }
};

// Persistence problems: unreadable files, corrupted checkpoints or records.
class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io_error"; }
};

// Report inputs lacking the series a plot needs.
class ReportError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "report_error"; }
};

}  // namespace duda
