#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace metaper {

/// Machine-readable failure categories. The string form is what the CLI
/// prints in its error JSON and what the rejects files carry.
enum class ErrorCode {
  kZeroVector,
  kShapeMismatch,
  kNonFiniteLoss,
  kSequenceTooLong,
  kMissingFrame,
  kEmptyShot,
  kNoVisualName,
  kNoOverlappingShot,
  kEmptyCategoryList,
  kEmptyNegativesSet,
  kEmptyInstance,
  kUnknownInstance,
  kEmptyCorpus,
  kNoRelevantShots,
  kInfeasibleMargin,
  kInvalidTemplate,
  kBadMagic,
  kCrcMismatch,
  kTruncated,
  kDimMismatch,
  kEncoderMismatch,
  kSchema,
  kStoreNotFound,
  kFileNotFound,
  kIo,
  kInvalidArgument,
};

inline std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kZeroVector: return "ZERO_VECTOR";
    case ErrorCode::kShapeMismatch: return "SHAPE_MISMATCH";
    case ErrorCode::kNonFiniteLoss: return "NON_FINITE_LOSS";
    case ErrorCode::kSequenceTooLong: return "SEQUENCE_TOO_LONG";
    case ErrorCode::kMissingFrame: return "MISSING_FRAME";
    case ErrorCode::kEmptyShot: return "EMPTY_SHOT";
    case ErrorCode::kNoVisualName: return "NO_VISUAL_NAME";
    case ErrorCode::kNoOverlappingShot: return "NO_OVERLAPPING_SHOT";
    case ErrorCode::kEmptyCategoryList: return "EMPTY_CATEGORY_LIST";
    case ErrorCode::kEmptyNegativesSet: return "EMPTY_NEGATIVES_SET";
    case ErrorCode::kEmptyInstance: return "EMPTY_INSTANCE";
    case ErrorCode::kUnknownInstance: return "UNKNOWN_INSTANCE";
    case ErrorCode::kEmptyCorpus: return "EMPTY_CORPUS";
    case ErrorCode::kNoRelevantShots: return "NO_RELEVANT_SHOTS";
    case ErrorCode::kInfeasibleMargin: return "INFEASIBLE_MARGIN";
    case ErrorCode::kInvalidTemplate: return "INVALID_TEMPLATE";
    case ErrorCode::kBadMagic: return "BAD_MAGIC";
    case ErrorCode::kCrcMismatch: return "CRC_MISMATCH";
    case ErrorCode::kTruncated: return "TRUNCATED";
    case ErrorCode::kDimMismatch: return "DIM_MISMATCH";
    case ErrorCode::kEncoderMismatch: return "ENCODER_MISMATCH";
    case ErrorCode::kSchema: return "SCHEMA_ERROR";
    case ErrorCode::kStoreNotFound: return "STORE_NOT_FOUND";
    case ErrorCode::kFileNotFound: return "FILE_NOT_FOUND";
    case ErrorCode::kIo: return "IO_ERROR";
    case ErrorCode::kInvalidArgument: return "INVALID_ARGUMENT";
  }
  return "UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code),
        detail_(message) {}

  ErrorCode code() const noexcept { return code_; }
  std::string_view code_name() const noexcept { return error_code_name(code_); }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace metaper
