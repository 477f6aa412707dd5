#pragma once

#include <stdexcept>
#include <string>

namespace cad {

/// Base for every error raised by the library. `kind()` is a stable short tag
/// used in diagnostics and by the CLI to pick an exit code.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define CAD_DEFINE_ERROR(Name, tag)                                            \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& what) : Error(tag, what) {}           \
    };

CAD_DEFINE_ERROR(ShapeError, "shape")
CAD_DEFINE_ERROR(LabelError, "label")
CAD_DEFINE_ERROR(DivergenceError, "divergence")
CAD_DEFINE_ERROR(InsufficientDataError, "insufficient-data")
CAD_DEFINE_ERROR(ConditioningError, "conditioning")
CAD_DEFINE_ERROR(ParameterError, "parameter")
CAD_DEFINE_ERROR(ConfigError, "config")
CAD_DEFINE_ERROR(FormatError, "format")
CAD_DEFINE_ERROR(ParseError, "parse")
CAD_DEFINE_ERROR(OracleError, "oracle")
CAD_DEFINE_ERROR(IoError, "io")

#undef CAD_DEFINE_ERROR

} // namespace cad
