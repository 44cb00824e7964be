#pragma once

#include <stdexcept>
#include <string>

namespace nllpo {

enum class ErrorCode {
  kNotPositiveDefinite,
  kDimensionMismatch,
  kNotSquare,
  kNotSymmetric,
  kUnsupportedPrimitive,
  kNonFiniteLoss,
  kEmptyBatch,
  kTooFewSamples,
  kBreakdownNonFinite,
  kMissingColumn,
  kNonNumericCell,
  kEmptyFile,
  kIoError,
  kConfigError,
  kFormatError,
};

const char* to_string(ErrorCode code);

/// Every failure raised by the library carries one of the codes above so the
/// CLI can map it onto an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace nllpo
