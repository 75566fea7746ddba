#include "steerkit/error.hpp"

namespace steerkit {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Dimension: return "dimension";
        case ErrorKind::Domain: return "domain";
        case ErrorKind::Contract: return "contract";
        case ErrorKind::Lineage: return "lineage";
        case ErrorKind::Evaluation: return "evaluation";
        case ErrorKind::Capacity: return "capacity";
        case ErrorKind::Registration: return "registration";
        case ErrorKind::Lookup: return "lookup";
        case ErrorKind::Resolution: return "resolution";
        case ErrorKind::Config: return "config";
        case ErrorKind::Validation: return "validation";
        case ErrorKind::Index: return "index";
        case ErrorKind::DegenerateVariance: return "degenerate_variance";
        case ErrorKind::ClassBalance: return "class_balance";
        case ErrorKind::Optimization: return "optimization";
        case ErrorKind::Divergence: return "divergence";
        case ErrorKind::Format: return "format";
        case ErrorKind::UnsupportedVersion: return "unsupported_version";
        case ErrorKind::Truncated: return "truncated";
        case ErrorKind::ManifestInconsistent: return "manifest_inconsistent";
        case ErrorKind::Io: return "io";
        case ErrorKind::Methodology: return "methodology";
        case ErrorKind::Comparability: return "comparability";
        case ErrorKind::NotFound: return "not_found";
        case ErrorKind::Busy: return "busy";
    }
    return "unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

Error& Error::with_field(std::string path) {
    field_ = std::move(path);
    return *this;
}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace steerkit
