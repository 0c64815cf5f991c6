#pragma once

#include <stdexcept>
#include <string>

namespace prefseg {

/// Broad failure classes; the CLI maps each to a distinct exit code.
enum class ErrorKind {
  kShape = 1,
  kGeometry,
  kIndex,
  kNumeric,
  kLayout,
  kStructure,
  kConfig,
  kIo,
  kInvariant,
};

const char* error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

#define PREFSEG_DEFINE_ERROR(Name, Kind)                              \
  class Name : public Error {                                       \
   public:                                                          \
    explicit Name(const std::string& what) : Error(Kind, what) {}   \
  };

PREFSEG_DEFINE_ERROR(ShapeError, ErrorKind::kShape)
PREFSEG_DEFINE_ERROR(GeometryError, ErrorKind::kGeometry)
PREFSEG_DEFINE_ERROR(IndexError, ErrorKind::kIndex)
PREFSEG_DEFINE_ERROR(NumericError, ErrorKind::kNumeric)
PREFSEG_DEFINE_ERROR(LayoutError, ErrorKind::kLayout)
PREFSEG_DEFINE_ERROR(StructureError, ErrorKind::kStructure)
PREFSEG_DEFINE_ERROR(ConfigError, ErrorKind::kConfig)
PREFSEG_DEFINE_ERROR(IoError, ErrorKind::kIo)
PREFSEG_DEFINE_ERROR(InvariantError, ErrorKind::kInvariant)

#undef PREFSEG_DEFINE_ERROR

}  // namespace prefseg
