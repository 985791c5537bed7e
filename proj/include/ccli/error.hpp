// Copyright 2026 The CCLI Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ccli {

/// Base class for every error raised by the engine. `kind()` is a stable
/// identifier used by the CLI for machine-parsable error lines.
class Error : public std::runtime_error {
 public:
  Error(std::string_view kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  std::string_view kind() const noexcept { return kind_; }

 private:
  std::string_view kind_;
};

#define CCLI_DEFINE_ERROR(Name)                                    \
  class Name : public Error {                                      \
   public:                                                         \
    explicit Name(const std::string& what) : Error(#Name, what) {} \
  }

CCLI_DEFINE_ERROR(ZeroVectorError);
CCLI_DEFINE_ERROR(ShapeError);
CCLI_DEFINE_ERROR(LabelError);
CCLI_DEFINE_ERROR(NonFiniteGradError);
CCLI_DEFINE_ERROR(NonFiniteError);
CCLI_DEFINE_ERROR(ScheduleError);
CCLI_DEFINE_ERROR(HyperparamError);
CCLI_DEFINE_ERROR(FormatError);
CCLI_DEFINE_ERROR(CorruptBundleError);
CCLI_DEFINE_ERROR(InsufficientShotsError);
CCLI_DEFINE_ERROR(InsufficientSupportError);
CCLI_DEFINE_ERROR(ClassMapError);
CCLI_DEFINE_ERROR(ConfigError);
CCLI_DEFINE_ERROR(IoError);

#undef CCLI_DEFINE_ERROR

}  // namespace ccli
