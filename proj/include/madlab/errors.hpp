#pragma once

#include <stdexcept>
#include <string>

namespace madlab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Caller supplied an argument outside the operation's domain.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Malformed input data (IDX, CSV, datasets with empty classes, ...).
class DataError : public Error {
public:
    enum class Kind { BadMagic, CountMismatch, Truncated, Parse, Range, Empty, Io, MissingClass };

    DataError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

class CheckpointError : public Error {
public:
    enum class Kind { Io, Corrupt, Version, ShapeMismatch };

    CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

/// Configuration text could not be parsed or names an unknown option.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss. Carries the last batch with a finite loss.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, long last_finite_epoch, long last_finite_batch)
        : Error(what), epoch_(last_finite_epoch), batch_(last_finite_batch) {}
    long last_finite_epoch() const noexcept { return epoch_; }
    long last_finite_batch() const noexcept { return batch_; }

private:
    long epoch_;
    long batch_;
};

}  // namespace madlab
