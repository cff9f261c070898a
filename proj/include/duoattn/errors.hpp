#pragma once

#include <stdexcept>
#include <string>

namespace duoattn {

// Every failure raised by the library derives from Error so callers (and the
// C API) can map it onto a stable error kind.
enum class ErrorKind {
    Config,
    Shape,
    Length,
    Contract,
    Numeric,
    Training,
    Parse,
    Invariant,
    Io,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, "configuration error: " + what) {}
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& what) : Error(ErrorKind::Shape, "shape error: " + what) {}
};

class LengthError : public Error {
public:
    explicit LengthError(const std::string& what) : Error(ErrorKind::Length, "length error: " + what) {}
};

class ContractError : public Error {
public:
    explicit ContractError(const std::string& what) : Error(ErrorKind::Contract, "contract violation: " + what) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorKind::Numeric, "numeric error: " + what) {}
};

class TrainingError : public Error {
public:
    explicit TrainingError(const std::string& what) : Error(ErrorKind::Training, "training error: " + what) {}
};

class ParseError : public Error {
public:
    ParseError(const std::string& source, std::size_t line, const std::string& what)
        : Error(ErrorKind::Parse, "parse error: " + source + ":" + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class InvariantError : public Error {
public:
    explicit InvariantError(const std::string& what) : Error(ErrorKind::Invariant, "invariant violation: " + what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(ErrorKind::Io, "i/o error: " + what) {}
};

}  // namespace duoattn
