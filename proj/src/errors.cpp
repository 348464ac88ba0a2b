#include "flns/errors.hpp"

namespace flns {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kUnknownSymbol: return "UnknownSymbol";
    case ErrorCode::kSequenceTooLong: return "SequenceTooLong";
    case ErrorCode::kPatchOutOfRange: return "PatchOutOfRange";
    case ErrorCode::kOverrideConflict: return "OverrideConflict";
    case ErrorCode::kInvalidTarget: return "InvalidTarget";
    case ErrorCode::kInsufficientData: return "InsufficientData";
    case ErrorCode::kUnsupportedFormat: return "UnsupportedFormat";
    case ErrorCode::kCorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::kSampleTooShort: return "SampleTooShort";
    case ErrorCode::kTrainingDiverged: return "TrainingDiverged";
    case ErrorCode::kDimensionError: return "DimensionError";
    case ErrorCode::kSamplingExhausted: return "SamplingExhausted";
    case ErrorCode::kRangeError: return "RangeError";
    case ErrorCode::kArtifactMissing: return "ArtifactMissing";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kIoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace flns
