#pragma once

#include <stdexcept>
#include <string>

namespace moeroute {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* kind() const noexcept { return "error"; }
};

class DimensionError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "dimension"; }
};

class NumericError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "numeric"; }
};

/// A caller broke a documented precondition.
class ContractError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "contract"; }
};

class IndexError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "index"; }
};

class ConfigError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "config"; }
};

class StabilityError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "stability"; }
};

class ParseError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "parse"; }
};

class IoError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "io"; }
};

}  // namespace moeroute
