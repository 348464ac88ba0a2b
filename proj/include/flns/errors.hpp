#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace flns {

enum class ErrorCode {
  kEmptyInput,
  kUnknownSymbol,
  kSequenceTooLong,
  kPatchOutOfRange,
  kOverrideConflict,
  kInvalidTarget,
  kInsufficientData,
  kUnsupportedFormat,
  kCorruptCheckpoint,
  kSampleTooShort,
  kTrainingDiverged,
  kDimensionError,
  kSamplingExhausted,
  kRangeError,
  kArtifactMissing,
  kInvalidConfig,
  kIoError,
};

std::string_view error_code_name(ErrorCode code);

// All library failures are reported through this type; `code()` is stable and
// is what the CLI and the HTTP service map to exit codes / status codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace flns
