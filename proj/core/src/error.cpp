#include "nllpo/error.hpp"

namespace nllpo {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kNotSquare: return "NotSquare";
    case ErrorCode::kNotSymmetric: return "NotSymmetric";
    case ErrorCode::kUnsupportedPrimitive: return "UnsupportedPrimitive";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kEmptyBatch: return "EmptyBatch";
    case ErrorCode::kTooFewSamples: return "TooFewSamples";
    case ErrorCode::kBreakdownNonFinite: return "BreakdownNonFinite";
    case ErrorCode::kMissingColumn: return "MissingColumn";
    case ErrorCode::kNonNumericCell: return "NonNumericCell";
    case ErrorCode::kEmptyFile: return "EmptyFile";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kConfigError: return "ConfigError";
    case ErrorCode::kFormatError: return "FormatError";
  }
  return "Unknown";
}

}  // namespace nllpo
