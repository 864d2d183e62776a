#pragma once

#include <stdexcept>
#include <string>

namespace docklab {

// Error taxonomy mirrors the CLI exit codes: ConfigError -> 2,
// DataError -> 3, NumericError -> 4.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input files, shape mismatches, fit failures.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values reached the numeric core.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace docklab
