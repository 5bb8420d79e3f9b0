#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ymask {

// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Invalid module or model configuration (head counts, widths, window sizes).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Misuse of the autodiff tape (double backward, detached loss, ...).
class TapeError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t line)
        : std::runtime_error(what + " at line " + std::to_string(line)), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Raised by the trainer when a loss component stops being finite.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace ymask
