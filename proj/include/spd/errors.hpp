#pragma once

#include <stdexcept>
#include <string>

namespace spd {

// Base for all library errors. Subclasses map to exit codes in the CLI:
// validation-type errors -> 1, numeric/runtime errors -> 2.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct ParseError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct ConflictError : Error {
    using Error::Error;
};
struct MissingKeyError : Error {
    using Error::Error;
};
struct MissingLanguageError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};

}  // namespace spd
