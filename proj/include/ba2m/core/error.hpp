#pragma once

#include <stdexcept>
#include <string>

namespace ba2m {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not line up for an op.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Channel count not divisible by the requested group count.
class GroupingError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Caller-supplied values outside an op's documented domain.
class InputError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf produced or consumed where only finite values are allowed.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Malformed file contents (checkpoint, CIFAR binary, spec text).
class FormatError : public Error {
public:
    using Error::Error;
};

class SpecError : public Error {
public:
    using Error::Error;
};

/// A mathematical precondition of a check does not hold (e.g. a weight outside (0,1)).
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// A runtime invariant that should always hold was observed broken.
class InvariantViolation : public Error {
public:
    using Error::Error;
};

}  // namespace ba2m
