#pragma once

#include <stdexcept>
#include <string>

namespace crab {

// Precondition / invariant failures at API boundaries.
struct ContractViolation : std::logic_error {
    explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

// A non-empty input was required.
struct EmptyInputError : std::invalid_argument {
    explicit EmptyInputError(const std::string& what) : std::invalid_argument(what) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

struct BadMagicError : IoError {
    explicit BadMagicError(const std::string& what) : IoError(what) {}
};

struct TruncatedFileError : IoError {
    explicit TruncatedFileError(const std::string& what) : IoError(what) {}
};

struct CountMismatchError : IoError {
    explicit CountMismatchError(const std::string& what) : IoError(what) {}
};

struct MalformedSnapshotError : IoError {
    explicit MalformedSnapshotError(const std::string& what) : IoError(what) {}
};

struct EstimationError : std::runtime_error {
    explicit EstimationError(const std::string& what) : std::runtime_error(what) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ContractViolation(what);
}

}  // namespace crab
