#pragma once

#include <stdexcept>
#include <string>

namespace mted {

// Error categories. Each maps to one C API status code and one CLI exit code.
enum class ErrorKind {
  kDimension,
  kDomain,
  kNumeric,
  kUsage,
  kConfig,
  kIo,
  kFormat,
  kCorruption,
  kSequencing,
  kPlacement,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define MTED_DEFINE_ERROR(Name, Kind)                                 \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(Kind, what) {}     \
  };

MTED_DEFINE_ERROR(DimensionError, ErrorKind::kDimension)
MTED_DEFINE_ERROR(DomainError, ErrorKind::kDomain)
MTED_DEFINE_ERROR(NumericError, ErrorKind::kNumeric)
MTED_DEFINE_ERROR(UsageError, ErrorKind::kUsage)
MTED_DEFINE_ERROR(ConfigError, ErrorKind::kConfig)
MTED_DEFINE_ERROR(IoError, ErrorKind::kIo)
MTED_DEFINE_ERROR(FormatError, ErrorKind::kFormat)
MTED_DEFINE_ERROR(CorruptionError, ErrorKind::kCorruption)
MTED_DEFINE_ERROR(SequencingError, ErrorKind::kSequencing)
MTED_DEFINE_ERROR(PlacementError, ErrorKind::kPlacement)

#undef MTED_DEFINE_ERROR

}  // namespace mted
