#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace etag {

// Tensor extents disagree with what an operation requires.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// An argument lies outside the documented domain (bad label, tau <= 0, ...).
struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

// Operation called in the wrong phase, e.g. incremental loss without a snapshot.
struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

// A closure under finite-difference evaluation produced a non-finite value.
struct EvaluationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training diverged (NaN/Inf loss). Carries enough context for a diagnostics file.
struct NumericalError : std::runtime_error {
    NumericalError(const std::string& what, std::size_t task, std::string phase, std::size_t epoch)
        : std::runtime_error(what), task(task), phase(std::move(phase)), epoch(epoch) {}
    std::size_t task;
    std::string phase;
    std::size_t epoch;
};

// Malformed binary input. `offset` is the byte position where parsing failed.
struct FormatError : std::runtime_error {
    FormatError(const std::string& what, std::uint64_t offset)
        : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset(offset) {}
    std::uint64_t offset;
};

// Unknown or ill-typed configuration key.
struct ConfigError : std::runtime_error {
    ConfigError(const std::string& what, std::string key)
        : std::runtime_error(what), key(std::move(key)) {}
    std::string key;
};

}  // namespace etag
