#pragma once

#include <stdexcept>
#include <string>

namespace kinefit {

// Error taxonomy mirrors the CLI exit codes: usage -> 1, input/format -> 2,
// numerical failure -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UsageError : Error {
    using Error::Error;
};

struct InputError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

// Shape/dimension mismatches between declared and supplied tensors.
struct ShapeError : InputError {
    using InputError::InputError;
};

// Raised by projection when a point has non-positive camera depth. The fit
// loop never sees this; it zero-weights such terms instead.
struct BehindCameraError : Error {
    using Error::Error;
};

}  // namespace kinefit
