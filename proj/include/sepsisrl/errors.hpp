#pragma once

#include <stdexcept>
#include <string>

namespace sepsisrl {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration value or malformed config file.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed input data (CSV parse failures, schema violations). Messages
/// name the offending row where applicable.
class DataError : public Error {
public:
    using Error::Error;
};

/// Too few samples to fit or estimate (empty cohort, < 4 nonzero doses, ...).
class InsufficientDataError : public Error {
public:
    using Error::Error;
};

/// Input outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Mismatched tensor/vector dimensions.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Index outside a container's valid range.
class IndexError : public Error {
public:
    using Error::Error;
};

/// Missing or stale upstream pipeline artifact.
class DependencyError : public Error {
public:
    using Error::Error;
};

} // namespace sepsisrl
