#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace c3po {

enum class ErrorKind {
    InvalidSpec,
    Domain,
    UnsupportedMode,
    UnsupportedFamily,
    SingularDemand,
    FailedToBracket,
    InvalidBounds,
    Infeasible,
    NotInvertible,
    DivisionByZero,
    EmptyInput,
    SamplingFailure,
    InvalidBaseline,
    Shape,
    Capacity,
    Divergence,
    Io,
    SchemaVersion,
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidSpec: return "invalid-spec";
        case ErrorKind::Domain: return "domain";
        case ErrorKind::UnsupportedMode: return "unsupported-mode";
        case ErrorKind::UnsupportedFamily: return "unsupported-family";
        case ErrorKind::SingularDemand: return "singular-demand";
        case ErrorKind::FailedToBracket: return "failed-to-bracket";
        case ErrorKind::InvalidBounds: return "invalid-bounds";
        case ErrorKind::Infeasible: return "infeasible";
        case ErrorKind::NotInvertible: return "not-invertible";
        case ErrorKind::DivisionByZero: return "division-by-zero";
        case ErrorKind::EmptyInput: return "empty-input";
        case ErrorKind::SamplingFailure: return "sampling-failure";
        case ErrorKind::InvalidBaseline: return "invalid-baseline";
        case ErrorKind::Shape: return "shape";
        case ErrorKind::Capacity: return "capacity";
        case ErrorKind::Divergence: return "divergence";
        case ErrorKind::Io: return "io";
        case ErrorKind::SchemaVersion: return "schema-version";
    }
    return "unknown";
}

/// Every failure raised by the library carries a machine-readable kind.
class Error : public std::runtime_error {
   public:
    Error(ErrorKind kind, const std::string &message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

   private:
    ErrorKind kind_;
};

}  // namespace c3po
