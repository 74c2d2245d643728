#pragma once

#include <stdexcept>
#include <string>

namespace stepmask {

// Base of every error raised by the library. Subclasses map one-to-one onto
// the failure categories callers distinguish (the CLI turns them into exit
// codes).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define STEPMASK_DEFINE_ERROR(Name)          \
  class Name : public Error {                \
   public:                                   \
    using Error::Error;                      \
  }

STEPMASK_DEFINE_ERROR(InvalidInput);
STEPMASK_DEFINE_ERROR(MissingEmbedding);
STEPMASK_DEFINE_ERROR(DimensionError);
STEPMASK_DEFINE_ERROR(InvalidDistribution);
STEPMASK_DEFINE_ERROR(ConfigError);
STEPMASK_DEFINE_ERROR(ParseError);
STEPMASK_DEFINE_ERROR(VocabularyMismatch);
STEPMASK_DEFINE_ERROR(InvalidAnnotation);
STEPMASK_DEFINE_ERROR(CapacityError);
STEPMASK_DEFINE_ERROR(TraceError);
STEPMASK_DEFINE_ERROR(InvalidTarget);
STEPMASK_DEFINE_ERROR(SynthesisError);

#undef STEPMASK_DEFINE_ERROR

// Raised when a training loss becomes non-finite. Carries the path of the
// last-good checkpoint when one was written.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::string checkpoint)
      : Error(what), checkpoint_(std::move(checkpoint)) {}

  const std::string& checkpoint() const { return checkpoint_; }

 private:
  std::string checkpoint_;
};

}  // namespace stepmask
