#pragma once

#include <stdexcept>
#include <string>

namespace p3d {

// Base for all toolkit errors so callers can catch one type.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor rank/extent disagreement between operands.
struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Geometrically impossible configuration (non-positive output extent,
// indivisible pooling/window extents, ...).
struct GeometryError : Error {
    explicit GeometryError(const std::string& msg) : Error(msg) {}
};

// A documented precondition of an operation was violated.
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Stored data and its declared layout disagree (wrong byte count, bad magic).
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

// Checksum mismatch on stored data.
struct IntegrityError : Error {
    explicit IntegrityError(const std::string& msg) : Error(msg) {}
};

// Input whose value range collapses to a point where an affine rescale is required.
struct DegenerateRangeError : Error {
    explicit DegenerateRangeError(const std::string& msg) : Error(msg) {}
};

// A recorded operation has no backward rule.
struct UnsupportedOpError : Error {
    explicit UnsupportedOpError(const std::string& msg) : Error(msg) {}
};

// Training produced a non-finite loss.
struct DivergenceError : Error {
    DivergenceError(const std::string& msg, int epoch, int batch)
        : Error(msg), epoch(epoch), batch(batch) {}
    int epoch = -1;
    int batch = -1;
};

// A window set misses members required for composition.
struct CompletenessError : Error {
    explicit CompletenessError(const std::string& msg) : Error(msg) {}
};

}  // namespace p3d
