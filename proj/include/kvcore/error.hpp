#pragma once

#include <stdexcept>
#include <string>

namespace kvcore {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed or truncated file, bad header, non-finite payload.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Filesystem failure (open, write, rename).
class IoError : public Error {
public:
    using Error::Error;
};

/// Solver non-convergence or an out-of-domain numerical input.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Invalid argument value (rank out of range, bad ratio, unknown config key).
class ArgumentError : public Error {
public:
    using Error::Error;
};

} // namespace kvcore
