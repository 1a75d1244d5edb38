#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ofusion {

enum class ErrorCode {
  InvalidArgument,
  DegenerateConfiguration,
  BehindCamera,
  NonpositiveDepth,
  EmptyInput,
  InsufficientNodes,
  SizeMismatch,
  EmptyGraph,
  GraphMismatch,
  SolverDiverged,
  NumericalFailure,
  UnreachableNodes,
  ParseError,
  CountMismatch,
  NegativeSigma,
  NonpositiveSigma,
  DimensionMismatch,
  BadSpec,
  DegenerateExtent,
  NothingVisible,
  EmptySelection,
  NoValidVertices,
  IoError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::BehindCamera: return "BehindCamera";
    case ErrorCode::NonpositiveDepth: return "NonpositiveDepth";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::InsufficientNodes: return "InsufficientNodes";
    case ErrorCode::SizeMismatch: return "SizeMismatch";
    case ErrorCode::EmptyGraph: return "EmptyGraph";
    case ErrorCode::GraphMismatch: return "GraphMismatch";
    case ErrorCode::SolverDiverged: return "SolverDiverged";
    case ErrorCode::NumericalFailure: return "NumericalFailure";
    case ErrorCode::UnreachableNodes: return "UnreachableNodes";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::NegativeSigma: return "NegativeSigma";
    case ErrorCode::NonpositiveSigma: return "NonpositiveSigma";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::BadSpec: return "BadSpec";
    case ErrorCode::DegenerateExtent: return "DegenerateExtent";
    case ErrorCode::NothingVisible: return "NothingVisible";
    case ErrorCode::EmptySelection: return "EmptySelection";
    case ErrorCode::NoValidVertices: return "NoValidVertices";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

/// Library-wide exception. Every failure path throws this with a code the
/// caller can switch on; the message carries the human-readable detail.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace ofusion
