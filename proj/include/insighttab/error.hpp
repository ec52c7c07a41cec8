#pragma once

#include <stdexcept>
#include <string>

namespace insighttab {

// Base of every error raised by the library. The CLI maps ValidationError
// subclasses to exit code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class SchemaError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class ParseError : public ValidationError {
public:
    ParseError(const std::string& what, std::size_t line)
        : ValidationError("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class EmptyInputError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class InsufficientDataError : public Error {
public:
    using Error::Error;
};

class ArgumentError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class GatewayError : public Error {
public:
    using Error::Error;
};

// Raised by the scripted client when it cannot read features back out of a
// rendered prompt, which means the prompt template drifted.
class ScriptError : public Error {
public:
    using Error::Error;
};

class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what)
        : Error(stage + ": " + what), stage_(std::move(stage)) {}

    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

}  // namespace insighttab
