#include "ccombat/error.hpp"

namespace ccombat {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidArgument: return "InvalidArgument";
        case ErrorKind::InsufficientData: return "InsufficientData";
        case ErrorKind::InsufficientRegions: return "InsufficientRegions";
        case ErrorKind::SingularDesign: return "SingularDesign";
        case ErrorKind::CovariateMismatch: return "CovariateMismatch";
        case ErrorKind::RegionMismatch: return "RegionMismatch";
        case ErrorKind::UnknownRegion: return "UnknownRegion";
        case ErrorKind::UnknownSite: return "UnknownSite";
        case ErrorKind::DegenerateVariance: return "DegenerateVariance";
        case ErrorKind::ConvergenceFailure: return "ConvergenceFailure";
        case ErrorKind::AlignmentError: return "AlignmentError";
        case ErrorKind::SchemaError: return "SchemaError";
        case ErrorKind::UnsupportedVersion: return "UnsupportedVersion";
    }
    return "Unknown";
}

void rethrow_for_region(const Error& err, const std::string& region_id) {
    std::string what = err.what();
    // Drop the "<Kind>: " prefix added by the constructor.
    const auto prefix = std::string(to_string(err.kind())) + ": ";
    if (what.starts_with(prefix)) what.erase(0, prefix.size());
    throw Error(err.kind(), "region '" + region_id + "': " + what);
}

}  // namespace ccombat
