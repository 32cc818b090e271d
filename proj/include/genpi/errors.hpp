#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace genpi {

/// Base for every error thrown by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A conversation violates its role/alternation invariants.
class StructuralError : public Error {
public:
    StructuralError(std::string const& what, std::size_t index)
        : Error(what + " (turn " + std::to_string(index) + ")"), index_(index) {}

    [[nodiscard]] std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

/// Malformed record file, config file, or fixture.
class FormatError : public Error {
public:
    FormatError(std::string const& what, std::size_t line = 0)
        : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what), line_(line) {}

    [[nodiscard]] std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Retryable failure to reach a generation backend.
class TransportError : public Error {
public:
    using Error::Error;
};

/// Input does not fit the model context.
class LengthError : public Error {
public:
    LengthError(std::string const& what, std::size_t limit)
        : Error(what + " (limit " + std::to_string(limit) + " tokens)"), limit_(limit) {}

    [[nodiscard]] std::size_t limit() const noexcept { return limit_; }

private:
    std::size_t limit_;
};

/// Backend produced nothing usable, or ran out of scripted responses.
class GenerationError : public Error {
public:
    using Error::Error;
};

/// A backend lacks a capability the caller requires.
class CapabilityError : public Error {
public:
    using Error::Error;
};

/// An operation precondition on its inputs was not met.
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss or divergence.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration value.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Lookup of an unregistered name.
class LookupError : public Error {
public:
    using Error::Error;
};

} // namespace genpi
