#pragma once

#include <stdexcept>
#include <string>

namespace nemf {

enum class ErrorCode {
  kShape,          // operand shapes not conformable
  kInvalidArgument,
  kIo,             // file cannot be opened / written
  kBadMagic,
  kUnsupportedVersion,
  kTruncated,
  kCorrupt,        // checksum or structural damage
  kNonFinite,
  kShapeMismatch,  // stored tensor disagrees with the expected configuration
  kGuard,          // request exceeds a hard evaluation budget
  kNumerical,      // non-finite value produced during optimization
  kConfig,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace nemf
