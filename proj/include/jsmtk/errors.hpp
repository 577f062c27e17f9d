#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace jsmtk {

// Bad argument to a public operation (shape mismatch, out-of-range voxel, ...).
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Invalid configuration value or combination.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Malformed or unsupported file contents. Carries the byte offset where parsing failed.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string &what, std::uint64_t offset)
        : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

// Non-finite values produced by an optimization or training loop.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace jsmtk
