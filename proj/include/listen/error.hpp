#pragma once

#include <stdexcept>
#include <string>

namespace listenkit {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define LISTEN_DEFINE_ERROR(Name)              \
  class Name : public Error {                  \
   public:                                     \
    using Error::Error;                        \
  }

LISTEN_DEFINE_ERROR(FormatError);       // malformed file / header / wire data
LISTEN_DEFINE_ERROR(UnsupportedError);  // well-formed but unsupported encoding
LISTEN_DEFINE_ERROR(CorruptionError);   // truncated or inconsistent payload
LISTEN_DEFINE_ERROR(ShapeError);        // tensor dimension mismatch
LISTEN_DEFINE_ERROR(ConfigError);       // invalid configuration
LISTEN_DEFINE_ERROR(DomainError);       // argument outside its mathematical domain
LISTEN_DEFINE_ERROR(InputError);        // empty or otherwise unusable input data
LISTEN_DEFINE_ERROR(PreconditionError); // caller broke a documented precondition
LISTEN_DEFINE_ERROR(InternalError);     // broken internal invariant
LISTEN_DEFINE_ERROR(IoError);           // filesystem / socket failure

#undef LISTEN_DEFINE_ERROR

}  // namespace listenkit
