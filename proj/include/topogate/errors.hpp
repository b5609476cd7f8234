#pragma once

#include <stdexcept>
#include <string>

namespace topogate {

/// Base class for all errors raised by the library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// nifti_io
struct BadMagic : Error {
    explicit BadMagic(const std::string& msg) : Error(msg) {}
};
struct UnsupportedDatatype : Error {
    explicit UnsupportedDatatype(const std::string& msg) : Error(msg) {}
};
struct TruncatedData : Error {
    explicit TruncatedData(const std::string& msg) : Error(msg) {}
};
struct IoFailure : Error {
    explicit IoFailure(const std::string& msg) : Error(msg) {}
};

// volume_core
struct ShapeMismatch : Error {
    explicit ShapeMismatch(const std::string& msg) : Error(msg) {}
};
struct VolumeTooSmall : Error {
    explicit VolumeTooSmall(const std::string& msg) : Error(msg) {}
};
struct CenterOutsideVolume : Error {
    explicit CenterOutsideVolume(const std::string& msg) : Error(msg) {}
};

// training_eval
struct TooFewPatients : Error {
    explicit TooFewPatients(const std::string& msg) : Error(msg) {}
};
struct SingleClass : Error {
    explicit SingleClass(const std::string& msg) : Error(msg) {}
};
struct EmptyInput : Error {
    explicit EmptyInput(const std::string& msg) : Error(msg) {}
};
struct EmptySplit : Error {
    explicit EmptySplit(const std::string& msg) : Error(msg) {}
};

// synth_cohort
struct BadSpec : Error {
    explicit BadSpec(const std::string& msg) : Error(msg) {}
};

// cli
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};
struct EmptyCleanSubset : Error {
    explicit EmptyCleanSubset(const std::string& msg) : Error(msg) {}
};
struct CheckpointMismatch : Error {
    explicit CheckpointMismatch(const std::string& msg) : Error(msg) {}
};

}  // namespace topogate
