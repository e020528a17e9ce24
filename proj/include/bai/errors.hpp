#pragma once

#include <stdexcept>
#include <string>

namespace bai {

// Shape disagreement between operands.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Token id or tensor index outside its valid range.
struct IndexError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

// NaN / non-finite values where finite ones are required.
struct NumericError : std::domain_error {
    using std::domain_error::domain_error;
};

// A precondition of an operation was violated by the caller.
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// Invalid model / training / schedule configuration.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Bad user data (over-length sequence, malformed corpus line, ...).
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint could not be read back.
struct LoadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace bai
