#ifndef CCOMBAT_ERROR_HPP
#define CCOMBAT_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>

namespace ccombat {

enum class ErrorKind {
    InvalidArgument,
    InsufficientData,
    InsufficientRegions,
    SingularDesign,
    CovariateMismatch,
    RegionMismatch,
    UnknownRegion,
    UnknownSite,
    DegenerateVariance,
    ConvergenceFailure,
    AlignmentError,
    SchemaError,
    UnsupportedVersion,
};

std::string_view to_string(ErrorKind kind);

/// Base exception for every failure raised by the library. The kind drives
/// the CLI exit-code policy.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

/// Re-raises `err` with the region id prefixed to its message.
[[noreturn]] void rethrow_for_region(const Error& err, const std::string& region_id);

}  // namespace ccombat

#endif
