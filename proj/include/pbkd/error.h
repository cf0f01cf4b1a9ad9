#ifndef PBKD_ERROR_H_
#define PBKD_ERROR_H_

#include <stdexcept>
#include <string>
#include <string_view>

namespace pbkd {

enum class ErrorCode {
  kMalformedTrajectory,
  kCapExceeded,
  kUnknownState,
  kDimensionMismatch,
  kEmptyDataset,
  kNonFinite,
  kMissingOracle,
  kIterationOrderViolation,
  kConfigInvalid,
  kIncompatibleRuns,
  kNonPositivePoint,
  kIo,
};

std::string_view ErrorCodeName(ErrorCode code);

// All library failures are reported through this exception; `code()` is the
// machine-readable category, `what()` carries the context.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void Fail(ErrorCode code, const std::string& message);

// Throws kNonFinite naming `what` if `value` is NaN or infinite.
void CheckFinite(double value, std::string_view what);

}  // namespace pbkd

#endif  // PBKD_ERROR_H_
