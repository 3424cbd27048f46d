#pragma once

#include <stdexcept>
#include <string>

namespace robad {

/// Base for every error the library raises.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit together.
class DimensionError : public Error {
  public:
    using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
  public:
    using Error::Error;
};

/// Index outside a table or container.
class IndexError : public Error {
  public:
    using Error::Error;
};

/// Invalid configuration value or unknown configuration key.
class ConfigError : public Error {
  public:
    ConfigError(std::string key, const std::string &what)
        : Error(what), key_(std::move(key)) {}
    explicit ConfigError(const std::string &what) : Error(what) {}

    const std::string &key() const noexcept { return key_; }

  private:
    std::string key_;
};

/// Malformed input data (corpus lines, vocab files).
class DataError : public Error {
  public:
    using Error::Error;
};

class ParseError : public DataError {
  public:
    ParseError(std::size_t line, const std::string &what)
        : DataError("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

  private:
    std::size_t line_;
};

class IoError : public Error {
  public:
    using Error::Error;
};

/// Checkpoint bytes are not a valid checkpoint.
class FormatError : public Error {
  public:
    using Error::Error;
};

/// Checkpoint was written for a different model configuration.
class CompatibilityError : public Error {
  public:
    using Error::Error;
};

} // namespace robad
