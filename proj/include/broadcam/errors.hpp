#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace broadcam {

enum class ErrorCode {
  kIo,
  kBadFormat,
  kMissingLayer,
  kNonFiniteInput,
  kUnsupportedDtype,
  kNotSingleChannel,
  kDuplicateSample,
  kEmptyLabel,
  kOutOfRange,
  kShapeMismatch,
  kDimensionMismatch,
  kSingularSystem,
  kInvalidArgument,
  kDiverged,
  kDuplicateLayer,
  kSampleMismatch,
  kMissingMask,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Raised by fit_gd_classifier when the loss stops being finite.
class DivergedError : public Error {
 public:
  explicit DivergedError(int epoch);

  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace broadcam
