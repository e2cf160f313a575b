#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ldreg {

enum class ErrorCode {
    MissingFile,
    MalformedHeader,
    PayloadSizeMismatch,
    IoFailure,
    DegenerateVariance,
    EmptyForeground,
    UnreachableTarget,
    ShapeMismatch,
    GridTooSmall,
    OddDimensionForStride2,
    DegenerateBatch,
    IndivisibleShape,
    EmptyDataset,
    CaseWithoutLabels,
    NonFiniteLoss,
    DegenerateCase,
    CheckpointMismatch,
    EmptyLandmark,
    VanishedMass,
    EmptyList,
    TooFewPatients,
    InvalidArgument,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::PayloadSizeMismatch: return "PayloadSizeMismatch";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::DegenerateVariance: return "DegenerateVariance";
    case ErrorCode::EmptyForeground: return "EmptyForeground";
    case ErrorCode::UnreachableTarget: return "UnreachableTarget";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::GridTooSmall: return "GridTooSmall";
    case ErrorCode::OddDimensionForStride2: return "OddDimensionForStride2";
    case ErrorCode::DegenerateBatch: return "DegenerateBatch";
    case ErrorCode::IndivisibleShape: return "IndivisibleShape";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::CaseWithoutLabels: return "CaseWithoutLabels";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::DegenerateCase: return "DegenerateCase";
    case ErrorCode::CheckpointMismatch: return "CheckpointMismatch";
    case ErrorCode::EmptyLandmark: return "EmptyLandmark";
    case ErrorCode::VanishedMass: return "VanishedMass";
    case ErrorCode::EmptyList: return "EmptyList";
    case ErrorCode::TooFewPatients: return "TooFewPatients";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    }
    return "Unknown";
}

/// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

/// Raised when the smoothing exponent cannot reach the requested mass.
class UnreachableTargetError : public Error {
public:
    UnreachableTargetError(double target, double achieved, double exponent)
        : Error(ErrorCode::UnreachableTarget,
                "target mass " + std::to_string(target) + " not reachable, achieved " +
                    std::to_string(achieved)),
          achieved_(achieved), exponent_(exponent) {}

    double achieved_sum() const noexcept { return achieved_; }
    double exponent() const noexcept { return exponent_; }

private:
    double achieved_;
    double exponent_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool condition, ErrorCode code, const std::string& what) {
    if (!condition) fail(code, what);
}

} // namespace ldreg
