#pragma once

#include <stdexcept>
#include <string>

namespace cimt {

// Shape/dimension violations in tensor ops.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API contract violations (non-scalar loss, axis out of range, ...).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad run configuration (unknown keys, invalid ranges, preset mismatch).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed input data (labels out of range, corrupt manifests).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Filesystem / serialization failures.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training diverged past the non-finite-gradient skip cap.
struct DivergedError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint corrupt, wrong version, or wrong preset for the requested use.
struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Reports being compared do not cover the same cases.
struct PairingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace cimt
