#pragma once

#include <stdexcept>
#include <string>

namespace snbi {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed input file (bad line, unknown field, wrong type).
class FormatError : public Error {
public:
    using Error::Error;
};

/// Structurally valid input that breaks a domain invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Filesystem / stream failures.
class IoError : public Error {
public:
    using Error::Error;
};

/// Array or image with an unexpected shape (empty, wrong channel count...).
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Non-finite value where a finite one is required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Record of the wrong modality for the requested operation.
class ModalityError : public Error {
public:
    using Error::Error;
};

} // namespace snbi
