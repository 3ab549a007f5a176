#include "psc/errors.hpp"

namespace psc {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNonSymmetric: return "NonSymmetric";
    case ErrorCode::kNonFinite: return "NonFinite";
    case ErrorCode::kNoConvergence: return "NoConvergence";
    case ErrorCode::kDegenerateK: return "DegenerateK";
    case ErrorCode::kTooFewSamples: return "TooFewSamples";
    case ErrorCode::kDimMismatch: return "DimMismatch";
    case ErrorCode::kNonPositiveVariance: return "NonPositiveVariance";
    case ErrorCode::kNonPositiveTau: return "NonPositiveTau";
    case ErrorCode::kNotSpd: return "NotSPD";
    case ErrorCode::kNotInComplement: return "NotInComplement";
    case ErrorCode::kBoundViolated: return "BoundViolated";
    case ErrorCode::kInvalidSpec: return "InvalidSpec";
    case ErrorCode::kConstantLabels: return "ConstantLabels";
    case ErrorCode::kBadFile: return "BadFile";
    case ErrorCode::kIoError: return "IoError";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
      code_(code) {}

void raise(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace psc
