#pragma once

#include <stdexcept>
#include <string>

namespace dice {

/// Operand shapes do not match what an operation requires.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A computation produced or was fed a non-finite value.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace dice
