#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace upass {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input violates a precondition or a data invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Malformed input file; carries the 1-based line number of the offending record.
class ParseError : public ValidationError {
public:
    ParseError(std::size_t line, const std::string& what)
        : ValidationError("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

class ConflictError : public Error {
public:
    using Error::Error;
};

/// Numerical failure during training (non-finite loss).
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace upass
