// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace peft {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Operand shapes are incompatible for the requested operation.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Operation is illegal in the object's current state (double merge, double backward, ...).
struct StateError : std::logic_error {
    using std::logic_error::logic_error;
};

/// Caller violated an operation precondition unrelated to shapes.
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

/// Invalid model/placement/task/training configuration.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Invalid runtime input data (e.g. out-of-range token id).
struct InputError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

/// Malformed or inconsistent checkpoint file.
struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

[[noreturn]] inline void throw_dims(const std::string& op, const Shape& a, const Shape& b) {
    throw DimensionError(op + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

}  // namespace detail
}  // namespace peft
