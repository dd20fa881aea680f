#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rocr {

enum class ErrorKind {
  kIo,
  kParse,
  kMissingTensor,
  kShape,
  kCorruption,
  kUnknownToken,
  kInput,
  kLength,
  kIndex,
  kProbe,
  kEmptyCovariance,
  kNumeric,
  kTask,
  kComparison,
  kOracle,
  kOptimization,
  kConfig,
};

std::string_view to_string(ErrorKind kind);

// Every failure surfaced by the library carries a kind so callers (the CLI in
// particular) can map it to a stable exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

}  // namespace rocr
