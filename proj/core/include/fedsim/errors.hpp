#pragma once

#include <stdexcept>

namespace fedsim {

// Error taxonomy shared by every module. The CLI maps these onto exit codes:
// ConfigError -> 2, DataError -> 3, everything below -> 4.
struct StructuralError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace fedsim
