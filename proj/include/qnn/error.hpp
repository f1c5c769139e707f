#pragma once

#include <stdexcept>
#include <string>

namespace qnn {

// Error taxonomy used across the library. The CLI maps ConfigError/ParseError
// to exit code 2 and NumericError to exit code 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct StateError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

// Parse failures carry the byte offset of the offending input.
struct ParseError : Error {
    ParseError(const std::string& what, std::size_t offset)
        : Error(what + " (byte offset " + std::to_string(offset) + ")"), byte_offset(offset) {}
    std::size_t byte_offset;
};

struct PrecisionError : Error {
    using Error::Error;
};

}  // namespace qnn
