#pragma once

#include <stdexcept>
#include <string>

namespace densekit {

// Base type for everything thrown by this library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration, shape, or constraint violation. CLI maps this to exit 2.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Data content is wrong (bad label, wrong record count, ...). CLI maps this to exit 2.
struct DataError : Error {
  explicit DataError(const std::string& msg) : Error(msg) {}
};

// A file exists but its bytes are not what the format requires. CLI maps this to exit 2.
struct FormatError : Error {
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

// File ended before the format said it would.
struct TruncatedFileError : FormatError {
  explicit TruncatedFileError(const std::string& msg) : FormatError(msg) {}
};

// Checkpoint was produced by a different architecture than the one loading it.
struct PlanMismatchError : ConfigError {
  explicit PlanMismatchError(const std::string& msg) : ConfigError(msg) {}
};

// API called in a way the caller controls (backward on a non-scalar, ...).
struct UsageError : Error {
  explicit UsageError(const std::string& msg) : Error(msg) {}
};

// Filesystem trouble: missing path, unreadable or unwritable file. CLI maps this to exit 1.
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// Training produced a non-finite loss. Carries epoch/step/lr in the message.
struct DivergenceError : Error {
  explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

// Bug trap: an internal invariant failed. Not meant to be caught.
struct InternalError : Error {
  explicit InternalError(const std::string& msg) : Error(msg) {}
};

}  // namespace densekit
