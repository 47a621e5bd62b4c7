#include "common/error.hpp"

namespace stldm {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::Config: return "config error";
        case ErrorKind::Shape: return "shape error";
        case ErrorKind::Dimension: return "dimension error";
        case ErrorKind::Constraint: return "constraint error";
        case ErrorKind::UnsupportedOp: return "unsupported op";
        case ErrorKind::Vocabulary: return "vocabulary error";
        case ErrorKind::Placement: return "placement error";
        case ErrorKind::GuidanceEmpty: return "guidance empty";
        case ErrorKind::Data: return "data error";
        case ErrorKind::Io: return "io error";
        case ErrorKind::Numeric: return "numeric failure";
    }
    return "error";
}

}  // namespace stldm
