#pragma once

#include <stdexcept>
#include <string>

namespace sentinel {

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed input file (rollout stream, scenario, calibration artifact).
/// Messages include a 1-based line number where one applies.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Violation of the calibration/evaluation protocol, e.g. a failure-labeled
/// episode in a calibration set. CLI exit code 2.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Mismatch between configuration and data, e.g. a calibration artifact for a
/// different detector, or incompatible shapes. CLI exit code 3.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An operation precondition does not hold (too few samples, bad parameter
/// range, out-of-order input). CLI exit code 5.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

}  // namespace sentinel
