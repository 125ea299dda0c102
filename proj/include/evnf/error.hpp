#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace evnf {

enum class ErrorCode {
  InvalidArgument,
  OutOfBounds,
  ParseError,
  BoundsError,
  IoError,
  DegenerateDepth,
  InsufficientSupport,
  DegenerateConfiguration,
  NoPlaneConsensus,
  BelowMinGradient,
  SingularSystem,
  PureRotation,
  RotationExplainsFlow,
  PureTranslationZeroNumerator,
  RankDeficient,
  TooFewObservations,
  NoConsensus,
  UnderDetermined,
  OutOfDomain,
  NumericalFailure,
};

inline constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::OutOfBounds: return "OutOfBounds";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::BoundsError: return "BoundsError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::DegenerateDepth: return "DegenerateDepth";
    case ErrorCode::InsufficientSupport: return "InsufficientSupport";
    case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::NoPlaneConsensus: return "NoPlaneConsensus";
    case ErrorCode::BelowMinGradient: return "BelowMinGradient";
    case ErrorCode::SingularSystem: return "SingularSystem";
    case ErrorCode::PureRotation: return "PureRotation";
    case ErrorCode::RotationExplainsFlow: return "RotationExplainsFlow";
    case ErrorCode::PureTranslationZeroNumerator: return "PureTranslationZeroNumerator";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::TooFewObservations: return "TooFewObservations";
    case ErrorCode::NoConsensus: return "NoConsensus";
    case ErrorCode::UnderDetermined: return "UnderDetermined";
    case ErrorCode::OutOfDomain: return "OutOfDomain";
    case ErrorCode::NumericalFailure: return "NumericalFailure";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and the CLI exit-code mapping) can branch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace evnf
