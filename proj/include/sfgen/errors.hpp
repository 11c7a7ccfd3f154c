#pragma once

#include <stdexcept>
#include <string>

namespace sfgen {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed or out-of-domain data (bad token ids, empty corpora, bad labels).
struct InputError : Error {
    using Error::Error;
};

/// A caller broke an operation's precondition.
struct ContractViolation : Error {
    using Error::Error;
};

/// Invalid configuration value, missing file, or stage-order violation.
struct ConfigError : Error {
    using Error::Error;
};

struct NumericalError : Error {
    using Error::Error;
};

/// Exhaustive enumeration would exceed the configured node budget.
struct BudgetError : Error {
    using Error::Error;
};

inline void expects(bool condition, const std::string& what) {
    if (!condition) throw ContractViolation(what);
}

}  // namespace sfgen
