#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace svfm {

// Failure domain, used by the CLI to choose an exit code:
// config -> 1, data -> 2, numerical -> 3.
enum class ErrorClass { config, data, numerical };

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, std::string message)
      : std::runtime_error(std::move(message)), class_(cls) {}

  ErrorClass error_class() const noexcept { return class_; }
  virtual const char* name() const noexcept { return "Error"; }

 private:
  ErrorClass class_;
};

#define SVFM_DEFINE_ERROR(Name, Class)                         \
  class Name : public Error {                                  \
   public:                                                     \
    explicit Name(const std::string& message)                  \
        : Error(ErrorClass::Class, message) {}                 \
    const char* name() const noexcept override { return #Name; } \
  }

// Configuration / usage problems.
SVFM_DEFINE_ERROR(ConfigError, config);
SVFM_DEFINE_ERROR(UnknownCommand, config);
SVFM_DEFINE_ERROR(InvalidArgument, config);

// Input data problems.
SVFM_DEFINE_ERROR(ParseError, data);
SVFM_DEFINE_ERROR(MissingCell, data);
SVFM_DEFINE_ERROR(MisalignedState, data);
SVFM_DEFINE_ERROR(NonFiniteValue, data);
SVFM_DEFINE_ERROR(IoError, data);
SVFM_DEFINE_ERROR(DimensionMismatch, data);

// Numerical failures.
SVFM_DEFINE_ERROR(EffectiveSampleTooSmall, numerical);
SVFM_DEFINE_ERROR(NotConverged, numerical);
SVFM_DEFINE_ERROR(SingularEigenvalue, numerical);
SVFM_DEFINE_ERROR(SingularLoadingGram, numerical);
SVFM_DEFINE_ERROR(SingularFactorCov, numerical);
SVFM_DEFINE_ERROR(RankDeficient, numerical);
SVFM_DEFINE_ERROR(ZeroVariance, numerical);
SVFM_DEFINE_ERROR(ZeroDenominator, numerical);

#undef SVFM_DEFINE_ERROR

inline int exit_code_for(ErrorClass cls) noexcept {
  switch (cls) {
    case ErrorClass::config:
      return 1;
    case ErrorClass::data:
      return 2;
    case ErrorClass::numerical:
      return 3;
  }
  return 3;
}

}  // namespace svfm
