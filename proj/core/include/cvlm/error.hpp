// Copyright 2026 The cvlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace cvlm {

enum class ErrorCode {
  kInvalidArgument,
  kShapeMismatch,
  kOutOfRange,
  kParse,
  kIo,
  kNotFound,
  kBadFormat,
  kUndecodableImage,
  kContextOverflow,
  kNonFinite,
  kAutograd,
};

const char* error_code_name(ErrorCode code);

// Single exception type for the library; callers switch on code() where the
// distinction matters (HTTP status mapping, CLI exit codes).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message) : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace cvlm
