#pragma once

#include <stdexcept>
#include <string>

namespace edit {

enum class ErrorCode {
    // numeric-core
    ZeroNorm,
    DimMismatch,
    EmptyInput,
    NonPositiveTemperature,
    SupportMismatch,
    RankTooLarge,
    NonFinite,
    // metadata-capture
    ShapeMismatch,
    DegenerateVector,
    DuplicateModuleId,
    IoFailure,
    BadMagic,
    VersionUnsupported,
    ChecksumMismatch,
    TruncatedFile,
    // alignment / stability
    EmptyVisibleSet,
    ZeroNormActivation,
    EmptyIntersection,
    NonMonotoneVisibleSet,
    StepOrder,
    // certificates / freeze
    WindowTooShort,
    NoValidSamples,
    AlphaNotContractive,
    NoAdmissiblePair,
    ProbeUnsupported,
    // toy model / analyzer
    VocabOverflow,
    NoRecordedGraph,
    ScheduleExhausted,
    MissingStep,
    TooFewSamples,
    TrainingDiverged,
    // harness
    ConfigError,
    ArtifactMismatch,
    InvalidArgument,
};

const char* to_string(ErrorCode code) noexcept;

/// Every failure surfaced by the library carries a machine-checkable code.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
    throw Error(code, what);
}

}  // namespace edit
