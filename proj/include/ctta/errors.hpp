#pragma once

#include <stdexcept>
#include <string>

namespace ctta {

// Typed failures. Anything numeric that produces NaN/Inf aborts with
// NonFiniteError instead of letting the corruption spread into traces.

struct ShapeMismatchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NonFiniteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NonScalarRootError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ZeroVectorError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidSpecError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BatchTooSmallError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LabelOutOfRangeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmptyPoolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MethodModelMismatchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IncompleteMatrixError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmptyTraceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CheckpointFormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace ctta
