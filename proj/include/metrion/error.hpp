#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace metrion {

enum class ErrorCode {
  kLookup,
  kKind,
  kConflict,
  kOrphanMeasurement,
  kDegenerateCounter,
  kUnknownComponent,
  kOrphanThread,
  kCounterRegression,
  kArgument,
  kParse,
  kSemantic,
  kVersioning,
  kStorage,
  kConfig,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kLookup: return "lookup";
    case ErrorCode::kKind: return "kind";
    case ErrorCode::kConflict: return "conflict";
    case ErrorCode::kOrphanMeasurement: return "orphan-measurement";
    case ErrorCode::kDegenerateCounter: return "degenerate-counter";
    case ErrorCode::kUnknownComponent: return "unknown-component";
    case ErrorCode::kOrphanThread: return "orphan-thread";
    case ErrorCode::kCounterRegression: return "counter-regression";
    case ErrorCode::kArgument: return "argument";
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kSemantic: return "semantic";
    case ErrorCode::kVersioning: return "versioning";
    case ErrorCode::kStorage: return "storage";
    case ErrorCode::kConfig: return "config";
  }
  return "unknown";
}

// Every failure raised by the library carries one of the codes above so
// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + " error: " + message),
        code_(code),
        detail_(message) {}

  ErrorCode code() const noexcept { return code_; }
  /// Message without the error-code prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace metrion
