#pragma once

#include <stdexcept>
#include <string>

namespace emc {

// Error taxonomy. The CLI maps these onto exit codes:
//   UsageError -> 1, DataError and subclasses -> 2, NumericError -> 3.

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed inputs: shape mismatches, bad indices, bad files, bad specs.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : DataError {
    explicit ShapeError(const std::string& msg) : DataError(msg) {}
};

struct IndexError : DataError {
    explicit IndexError(const std::string& msg) : DataError(msg) {}
};

struct FormatError : DataError {
    explicit FormatError(const std::string& msg) : DataError(msg) {}
};

// Donor trace lacks a cell a patch needs, or a patch spec overlaps itself.
struct PatchSpecError : DataError {
    explicit PatchSpecError(const std::string& msg) : DataError(msg) {}
};

struct IncompleteDonorError : DataError {
    explicit IncompleteDonorError(const std::string& msg) : DataError(msg) {}
};

// Numerically degenerate situations: zero-norm vectors, vanishing contrast
// denominators, undefined ratios, empty valid sets.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DegenerateVectorError : NumericError {
    explicit DegenerateVectorError(const std::string& msg) : NumericError(msg) {}
};

struct DegenerateContrastError : NumericError {
    explicit DegenerateContrastError(const std::string& msg) : NumericError(msg) {}
};

struct UndefinedRatioError : NumericError {
    explicit UndefinedRatioError(const std::string& msg) : NumericError(msg) {}
};

struct NoValidPairsError : NumericError {
    explicit NoValidPairsError(const std::string& msg) : NumericError(msg) {}
};

struct InternalError : std::logic_error {
    explicit InternalError(const std::string& msg) : std::logic_error(msg) {}
};

} // namespace emc
