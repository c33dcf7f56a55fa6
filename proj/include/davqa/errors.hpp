#pragma once

#include <stdexcept>
#include <string>

namespace davqa {

// Error taxonomy. Every throwing contract in the library uses one of these,
// so callers (and tests) can match on the failure class. kind() gives the
// class a stable machine-readable name for structured error reporting.

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
    virtual const char* kind() const { return "Error"; }
};

// Tensor dimensions do not line up for an operation.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
    const char* kind() const override { return "ShapeError"; }
};

// An index (token id, class target, row) is out of its valid range.
struct IndexError : Error {
    explicit IndexError(const std::string& msg) : Error(msg) {}
    const char* kind() const override { return "IndexError"; }
};

// An API precondition was violated (non-scalar backward, missing grads,
// training against an unfrozen backbone, ...).
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(msg) {}
    const char* kind() const override { return "ContractError"; }
};

// A named entity (hook site, domain) does not exist.
struct LookupError : Error {
    explicit LookupError(const std::string& msg) : Error(msg) {}
    const char* kind() const override { return "LookupError"; }
};

// A slot that must be free is already occupied.
struct ConflictError : Error {
    explicit ConflictError(const std::string& msg) : Error(msg) {}
    const char* kind() const override { return "ConflictError"; }
};

// A file or stream does not match the expected format or fails its checksum.
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error(msg) {}
    const char* kind() const override { return "FormatError"; }
};

// A configuration value is invalid or inconsistent.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
    const char* kind() const override { return "ConfigError"; }
};

// An I/O operation failed.
struct FileError : Error {
    explicit FileError(const std::string& msg) : Error(msg) {}
    const char* kind() const override { return "FileError"; }
};

// Internal state does not admit the requested operation (e.g. prototypes
// missing for soft routing).
struct StateError : Error {
    explicit StateError(const std::string& msg) : Error(msg) {}
    const char* kind() const override { return "StateError"; }
};

}  // namespace davqa
