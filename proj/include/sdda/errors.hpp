#pragma once

#include <stdexcept>
#include <string>

namespace sdda {

// Base of every error raised by the library. Each subclass maps onto one
// failure class of the CLI exit-status contract.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Violated precondition of an operation (bad argument, wrong state).
class ContractError : public Error {
public:
    using Error::Error;
};

// Incompatible tensor shapes.
class DimensionError : public ContractError {
public:
    using ContractError::ContractError;
};

// NaN or Inf where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

// Malformed persisted data (checkpoint, CSV).
class FormatError : public Error {
public:
    using Error::Error;
};

class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};

class CorruptionError : public FormatError {
public:
    using FormatError::FormatError;
};

// Invalid configuration file; the message names the key and the constraint.
class ConfigError : public Error {
public:
    using Error::Error;
};

// The source classifier did not reach the required accuracy.
class PretrainingFailed : public Error {
public:
    using Error::Error;
};

// A training run hit a non-finite loss.
class TrainingAborted : public Error {
public:
    using Error::Error;
};

} // namespace sdda
