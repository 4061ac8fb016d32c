#include "broadcam/errors.hpp"

namespace broadcam {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kIo: return "IoError";
    case ErrorCode::kBadFormat: return "BadFormat";
    case ErrorCode::kMissingLayer: return "MissingLayer";
    case ErrorCode::kNonFiniteInput: return "NonFiniteInput";
    case ErrorCode::kUnsupportedDtype: return "UnsupportedDtype";
    case ErrorCode::kNotSingleChannel: return "NotSingleChannel";
    case ErrorCode::kDuplicateSample: return "DuplicateSample";
    case ErrorCode::kEmptyLabel: return "EmptyLabel";
    case ErrorCode::kOutOfRange: return "OutOfRange";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kSingularSystem: return "SingularSystem";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kDiverged: return "Diverged";
    case ErrorCode::kDuplicateLayer: return "DuplicateLayer";
    case ErrorCode::kSampleMismatch: return "SampleMismatch";
    case ErrorCode::kMissingMask: return "MissingMask";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message),
      code_(code) {}

DivergedError::DivergedError(int epoch)
    : Error(ErrorCode::kDiverged,
            "loss became non-finite at epoch " + std::to_string(epoch)),
      epoch_(epoch) {}

}  // namespace broadcam
