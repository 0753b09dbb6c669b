#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace remo {

enum class ErrorCode : std::uint32_t {
  kRangeOverflow = 1,
  kShapeMismatch,
  kSketchReissue,
  kBadDims,
  kTokenOutOfRange,
  kEmptyInput,
  kCacheInconsistent,
  kSessionExhausted,
  kDecodeError,
  kLengthMismatch,
  kUnknownOp,
  kTransportClosed,
  kBindFailure,
  kAuditFail,
  kEmptyClass,
  kTrivialKernel,
  kDimTooLarge,
  kParseError,
  kEmptyRun,
  kTapUnavailable,
  kBadConfig,
  kProtocol,
};

inline std::string_view error_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kRangeOverflow: return "RangeOverflow";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kSketchReissue: return "SketchReissue";
    case ErrorCode::kBadDims: return "BadDims";
    case ErrorCode::kTokenOutOfRange: return "TokenOutOfRange";
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kCacheInconsistent: return "CacheInconsistent";
    case ErrorCode::kSessionExhausted: return "SessionExhausted";
    case ErrorCode::kDecodeError: return "DecodeError";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kUnknownOp: return "UnknownOp";
    case ErrorCode::kTransportClosed: return "TransportClosed";
    case ErrorCode::kBindFailure: return "BindFailure";
    case ErrorCode::kAuditFail: return "AuditFail";
    case ErrorCode::kEmptyClass: return "EmptyClass";
    case ErrorCode::kTrivialKernel: return "TrivialKernel";
    case ErrorCode::kDimTooLarge: return "DimTooLarge";
    case ErrorCode::kParseError: return "ParseError";
    case ErrorCode::kEmptyRun: return "EmptyRun";
    case ErrorCode::kTapUnavailable: return "TapUnavailable";
    case ErrorCode::kBadConfig: return "BadConfig";
    case ErrorCode::kProtocol: return "Protocol";
  }
  return "Unknown";
}

// Every failure in the library surfaces as an Error carrying a code, so
// callers (and the wire protocol) can dispatch on it without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(error_name(code)) + ": " + detail),
        code_(code),
        detail_(detail) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& detail) {
  throw Error(code, detail);
}

}  // namespace remo
