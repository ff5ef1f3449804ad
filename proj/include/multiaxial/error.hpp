#pragma once

#include <stdexcept>
#include <string>

namespace multiaxial {

/// Base class of every error raised by the toolkit. All subclasses describe
/// problems with inputs (files, shapes, configs), as opposed to programming
/// errors, which surface as std::logic_error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define MULTIAXIAL_DEFINE_ERROR(Name)    \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  };

MULTIAXIAL_DEFINE_ERROR(ParseError)
MULTIAXIAL_DEFINE_ERROR(UnsupportedFormatError)
MULTIAXIAL_DEFINE_ERROR(LengthMismatchError)
MULTIAXIAL_DEFINE_ERROR(IoError)
MULTIAXIAL_DEFINE_ERROR(RangeError)
MULTIAXIAL_DEFINE_ERROR(GeometryError)
MULTIAXIAL_DEFINE_ERROR(ShapeError)
MULTIAXIAL_DEFINE_ERROR(ConfigError)
MULTIAXIAL_DEFINE_ERROR(FormatError)
MULTIAXIAL_DEFINE_ERROR(CompatibilityError)
MULTIAXIAL_DEFINE_ERROR(OptimizerError)
MULTIAXIAL_DEFINE_ERROR(TrainingError)
MULTIAXIAL_DEFINE_ERROR(DomainError)
MULTIAXIAL_DEFINE_ERROR(RecordError)
MULTIAXIAL_DEFINE_ERROR(ContractError)
MULTIAXIAL_DEFINE_ERROR(PairingError)
MULTIAXIAL_DEFINE_ERROR(DegenerateImageError)

#undef MULTIAXIAL_DEFINE_ERROR

/// Error raised by a pipeline stage; the message is prefixed with the stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace multiaxial
