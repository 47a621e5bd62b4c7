#pragma once

#include <stdexcept>
#include <string>

namespace stldm {

enum class ErrorKind {
    Config,         // invalid configuration or usage
    Shape,          // tensor/grid shape inconsistent with an operation
    Dimension,      // matmul-style inner-dimension mismatch
    Constraint,     // architectural constraint violated (e.g. C_i < 16*C_t)
    UnsupportedOp,  // gradient requested through a non-differentiable node
    Vocabulary,     // caption token outside the closed vocabulary
    Placement,      // synthetic scene could not be placed
    GuidanceEmpty,  // thresholded guidance map has no active cell
    Data,           // malformed or missing dataset/checkpoint content
    Io,             // filesystem failure
    Numeric,        // NaN/Inf detected
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

}  // namespace stldm
