// Copyright 2026 The ReinPool Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace reinpool {

enum class ErrorCode {
  kDimensionMismatch,
  kShape,
  kCorruptStore,
  kDataValidation,
  kParse,
  kDuplicateEntry,
  kEmptyInput,
  kConfiguration,
  kNumericOverflow,
  kStorage,
  kChecksum,
  kIncompatibleCheckpoint,
};

inline std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDimensionMismatch: return "dimension-mismatch";
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kCorruptStore: return "corrupt-store";
    case ErrorCode::kDataValidation: return "data-validation";
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kDuplicateEntry: return "duplicate-entry";
    case ErrorCode::kEmptyInput: return "empty-input";
    case ErrorCode::kConfiguration: return "configuration";
    case ErrorCode::kNumericOverflow: return "numeric";
    case ErrorCode::kStorage: return "storage";
    case ErrorCode::kChecksum: return "checksum";
    case ErrorCode::kIncompatibleCheckpoint: return "incompatible-checkpoint";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + " error: " +
                           message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Process exit status for the CLI: 1 validation/config, 2 numeric, 3 I/O.
inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNumericOverflow:
      return 2;
    case ErrorCode::kStorage:
    case ErrorCode::kCorruptStore:
    case ErrorCode::kChecksum:
      return 3;
    default:
      return 1;
  }
}

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace reinpool
