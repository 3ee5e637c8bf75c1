#ifndef KELAB_ERRORS_HPP_
#define KELAB_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace kelab {

// Every domain failure is an Error with a stable machine-readable kind,
// so the CLI can map it to exit code 1 and a --json error object.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& msg)
      : std::runtime_error(msg), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

#define KELAB_DEFINE_ERROR(Name, kind_str)                    \
  class Name : public Error {                                 \
   public:                                                    \
    explicit Name(const std::string& msg)                     \
        : Error(kind_str, msg) {}                             \
  }

KELAB_DEFINE_ERROR(ShapeError, "shape");
KELAB_DEFINE_ERROR(SingularityError, "singular");
KELAB_DEFINE_ERROR(DegenerateInputError, "degenerate-input");
KELAB_DEFINE_ERROR(LengthError, "length");
KELAB_DEFINE_ERROR(ConfigError, "config");
KELAB_DEFINE_ERROR(ParseError, "parse");
KELAB_DEFINE_ERROR(SchemaError, "schema");
KELAB_DEFINE_ERROR(SchemeError, "scheme");
KELAB_DEFINE_ERROR(ModeError, "mode");
KELAB_DEFINE_ERROR(DataError, "data");
KELAB_DEFINE_ERROR(TemplateError, "template");
KELAB_DEFINE_ERROR(OptimizationError, "optimization");
KELAB_DEFINE_ERROR(TrainingError, "training");
KELAB_DEFINE_ERROR(UnsupportedSiteError, "unsupported-site");
KELAB_DEFINE_ERROR(IoError, "io");
KELAB_DEFINE_ERROR(CrcError, "crc");
KELAB_DEFINE_ERROR(VersionError, "version");
KELAB_DEFINE_ERROR(PreconditionError, "precondition");
KELAB_DEFINE_ERROR(DegenerateKeyError, "degenerate-key");

#undef KELAB_DEFINE_ERROR

}  // namespace kelab

#endif  // KELAB_ERRORS_HPP_
