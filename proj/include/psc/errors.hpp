#pragma once

#include <stdexcept>
#include <string>

namespace psc {

enum class ErrorCode {
  kNonSymmetric,
  kNonFinite,
  kNoConvergence,
  kDegenerateK,
  kTooFewSamples,
  kDimMismatch,
  kNonPositiveVariance,
  kNonPositiveTau,
  kNotSpd,
  kNotInComplement,
  kBoundViolated,
  kInvalidSpec,
  kConstantLabels,
  kBadFile,
  kIoError,
};

const char* error_code_name(ErrorCode code);

/// All library failures are reported through this exception type; `code()`
/// identifies the failure class so callers can branch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void raise(ErrorCode code, const std::string& message);

}  // namespace psc
