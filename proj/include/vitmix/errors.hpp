#pragma once

#include <stdexcept>
#include <string>

namespace vitmix {

// Base of every error thrown by the library. The CLI maps subclasses onto
// process exit codes (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IngestionError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Raised when the confidence filter leaves nothing to score.
class EmptyAfterFilterError : public Error {
 public:
  using Error::Error;
};

namespace exit_codes {
inline constexpr int kOk = 0;
inline constexpr int kConfig = 2;
inline constexpr int kIngestion = 3;
inline constexpr int kEmptyAfterFilter = 4;
}  // namespace exit_codes

inline int exit_code(const Error& e) {
  if (dynamic_cast<const EmptyAfterFilterError*>(&e)) return exit_codes::kEmptyAfterFilter;
  if (dynamic_cast<const IngestionError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const CorruptionError*>(&e) || dynamic_cast<const IoError*>(&e))
    return exit_codes::kIngestion;
  return exit_codes::kConfig;
}

}  // namespace vitmix
