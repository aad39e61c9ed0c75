#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mqsel {

enum class ErrorCode {
  DimensionMismatch,
  NonFiniteValue,
  InvalidQuantile,
  NegativeInput,
  InvalidPenalty,
  EmptyInput,
  NonPositiveWeight,
  IndexOutOfRange,
  ProblemTooLarge,
  SupportTooLarge,
  ZeroLoss,
  EmptyGrid,
  CandidateListEmpty,
  InvalidInput,
  InvalidScenario,
  DegenerateDenominator,
  FileNotFound,
  HeaderMismatch,
  ParseError,
  ResponseColumnMissing,
  InvalidConfig,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::InvalidQuantile: return "InvalidQuantile";
    case ErrorCode::NegativeInput: return "NegativeInput";
    case ErrorCode::InvalidPenalty: return "InvalidPenalty";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::NonPositiveWeight: return "NonPositiveWeight";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::ProblemTooLarge: return "ProblemTooLarge";
    case ErrorCode::SupportTooLarge: return "SupportTooLarge";
    case ErrorCode::ZeroLoss: return "ZeroLoss";
    case ErrorCode::EmptyGrid: return "EmptyGrid";
    case ErrorCode::CandidateListEmpty: return "CandidateListEmpty";
    case ErrorCode::InvalidInput: return "InvalidInput";
    case ErrorCode::InvalidScenario: return "InvalidScenario";
    case ErrorCode::DegenerateDenominator: return "DegenerateDenominator";
    case ErrorCode::FileNotFound: return "FileNotFound";
    case ErrorCode::HeaderMismatch: return "HeaderMismatch";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::ResponseColumnMissing: return "ResponseColumnMissing";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

namespace detail {

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace detail
}  // namespace mqsel
