#include "pbkd/error.h"

#include <cmath>

namespace pbkd {

std::string_view ErrorCodeName(ErrorCode code) {
  switch (code) {
    case ErrorCode::kMalformedTrajectory:
      return "MalformedTrajectory";
    case ErrorCode::kCapExceeded:
      return "CapExceeded";
    case ErrorCode::kUnknownState:
      return "UnknownState";
    case ErrorCode::kDimensionMismatch:
      return "DimensionMismatch";
    case ErrorCode::kEmptyDataset:
      return "EmptyDataset";
    case ErrorCode::kNonFinite:
      return "NonFinite";
    case ErrorCode::kMissingOracle:
      return "MissingOracle";
    case ErrorCode::kIterationOrderViolation:
      return "IterationOrderViolation";
    case ErrorCode::kConfigInvalid:
      return "ConfigInvalid";
    case ErrorCode::kIncompatibleRuns:
      return "IncompatibleRuns";
    case ErrorCode::kNonPositivePoint:
      return "NonPositivePoint";
    case ErrorCode::kIo:
      return "Io";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(ErrorCodeName(code)) + ": " + message),
      code_(code) {}

void Fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

void CheckFinite(double value, std::string_view what) {
  if (!std::isfinite(value)) {
    Fail(ErrorCode::kNonFinite, std::string(what) + " is not finite");
  }
}

}  // namespace pbkd
