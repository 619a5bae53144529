#ifndef MMSEG_ERROR_HPP
#define MMSEG_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>

namespace mmseg {

enum class ErrorCode {
  ShapeMismatch,
  BadLabel,
  IoError,
  EmptyCase,
  DuplicateId,
  ConfigError,
  Divergence,
  CheckpointMismatch,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
  case ErrorCode::ShapeMismatch: return "SHAPE_MISMATCH";
  case ErrorCode::BadLabel: return "BAD_LABEL";
  case ErrorCode::IoError: return "IO_ERROR";
  case ErrorCode::EmptyCase: return "EMPTY_CASE";
  case ErrorCode::DuplicateId: return "DUPLICATE_ID";
  case ErrorCode::ConfigError: return "CONFIG_ERROR";
  case ErrorCode::Divergence: return "DIVERGENCE";
  case ErrorCode::CheckpointMismatch: return "CHECKPOINT_MISMATCH";
  }
  return "UNKNOWN";
}

/// Exception carrying a machine-readable error code. The message is
/// prefixed with the code name so diagnostics stay greppable.
class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

private:
  ErrorCode code_;
};

} // namespace mmseg

#endif
