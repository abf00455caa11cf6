#pragma once

#include <stdexcept>
#include <string>

namespace retfuse {

// Error taxonomy shared by every module. The CLI maps kinds onto its exit-code
// contract: usage/config mistakes -> 2, runtime failures -> 1.
enum class ErrorKind {
  NotFound,
  DecodeError,
  UnsupportedFormat,
  InvalidArgument,
  LayoutError,
  EmptyDataset,
  IoError,
  ShapeError,
  IncompatibleCheckpoint,
  NumericError,
  WeightsUnavailable,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }
  bool is_usage_error() const noexcept {
    return kind_ == ErrorKind::InvalidArgument;
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind k, const std::string& msg) {
  throw Error(k, msg);
}

inline void require(bool cond, ErrorKind k, const std::string& msg) {
  if (!cond) fail(k, msg);
}

const char* error_kind_name(ErrorKind k);

}  // namespace retfuse
