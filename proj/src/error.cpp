#include "rocr/error.hpp"

namespace rocr {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kIo: return "io";
    case ErrorKind::kParse: return "parse";
    case ErrorKind::kMissingTensor: return "missing-tensor";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kCorruption: return "corruption";
    case ErrorKind::kUnknownToken: return "unknown-token";
    case ErrorKind::kInput: return "input";
    case ErrorKind::kLength: return "length";
    case ErrorKind::kIndex: return "index";
    case ErrorKind::kProbe: return "probe";
    case ErrorKind::kEmptyCovariance: return "empty-covariance";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kTask: return "task";
    case ErrorKind::kComparison: return "comparison";
    case ErrorKind::kOracle: return "oracle";
    case ErrorKind::kOptimization: return "optimization";
    case ErrorKind::kConfig: return "config";
  }
  return "unknown";
}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace rocr
