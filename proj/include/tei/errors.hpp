#pragma once

#include <stdexcept>
#include <string>

namespace tei {

// Broad failure classes. Each maps onto one CLI exit code.
enum class ErrorKind {
  usage,       // 2
  data,        // 3
  divergence,  // 4
  external     // 5
};

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return 2;
    case ErrorKind::data: return 3;
    case ErrorKind::divergence: return 4;
    case ErrorKind::external: return 5;
  }
  return 1;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define TEI_DEFINE_ERROR(Name, Kind)                                          \
  class Name : public Error {                                                 \
   public:                                                                    \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {}  \
  };

TEI_DEFINE_ERROR(UsageError, usage)
TEI_DEFINE_ERROR(DimensionError, data)
TEI_DEFINE_ERROR(AlignmentError, data)
TEI_DEFINE_ERROR(ParseError, data)
TEI_DEFINE_ERROR(VocabularyError, data)
TEI_DEFINE_ERROR(IoError, data)
TEI_DEFINE_ERROR(DivergenceError, divergence)
TEI_DEFINE_ERROR(BackendError, external)
TEI_DEFINE_ERROR(TransportError, external)
TEI_DEFINE_ERROR(ProtocolError, external)
TEI_DEFINE_ERROR(AugmentationError, external)
TEI_DEFINE_ERROR(JudgeProtocolError, external)
TEI_DEFINE_ERROR(ExtractorError, external)

#undef TEI_DEFINE_ERROR

// Zero-norm row handed to a cosine computation.
class DegenerateInputError : public Error {
 public:
  DegenerateInputError(const std::string& what, long row)
      : Error(ErrorKind::data, what), row_(row) {}
  long row() const noexcept { return row_; }

 private:
  long row_;
};

}  // namespace tei
