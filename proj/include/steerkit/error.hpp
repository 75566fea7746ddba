#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace steerkit {

enum class ErrorKind {
    Dimension,
    Domain,
    Contract,
    Lineage,
    Evaluation,
    Capacity,
    Registration,
    Lookup,
    Resolution,
    Config,
    Validation,
    Index,
    DegenerateVariance,
    ClassBalance,
    Optimization,
    Divergence,
    Format,
    UnsupportedVersion,
    Truncated,
    ManifestInconsistent,
    Io,
    Methodology,
    Comparability,
    NotFound,
    Busy,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message);

    ErrorKind kind() const noexcept { return kind_; }

    // Dotted path of the offending request field, when the error came from
    // validating a structured request.
    const std::string& field() const noexcept { return field_; }
    Error& with_field(std::string path);

private:
    ErrorKind kind_;
    std::string field_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

}  // namespace steerkit
