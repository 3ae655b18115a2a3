#pragma once

#include <stdexcept>
#include <string>

namespace presage {

// Error categories map to process exit codes (see tools/presage.cpp).
enum class ErrorCategory {
  generic = 1,
  config = 2,
  io = 3,
  format = 4,
  validation = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory cat, const std::string& msg)
      : std::runtime_error(msg), category_(cat) {}
  ErrorCategory category() const { return category_; }

 private:
  ErrorCategory category_;
};

// Invalid user-supplied configuration (bad dims, bad constants, bad paths
// detected before the stream starts).
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(ErrorCategory::config, msg) {}
};

// Filesystem / stream failures (missing file, truncated read, write failure).
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(ErrorCategory::io, msg) {}
};

// Malformed file content (bad magic, bad record syntax). Carries a location
// in the message whenever one is known.
struct FormatError : Error {
  explicit FormatError(const std::string& msg) : Error(ErrorCategory::format, msg) {}
};

// Well-formed input that violates a domain contract (out-of-bounds box,
// mismatched ids, non-finite values).
struct ValidationError : Error {
  explicit ValidationError(const std::string& msg) : Error(ErrorCategory::validation, msg) {}
};

// Tensor/operand shape disagreements.
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(ErrorCategory::validation, msg) {}
};

// API misuse (backward without a forward cache, finalize on empty stream).
struct UsageError : Error {
  explicit UsageError(const std::string& msg) : Error(ErrorCategory::generic, msg) {}
};

}  // namespace presage
