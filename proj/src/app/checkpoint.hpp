#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tensor/tensor.hpp"

namespace stldm {

// "STLDM1", u64 count, then per entry: u64 name length, name bytes,
// u64 rank, u64 dims, f64 values; all integers and floats little-endian.
using TensorEntries = std::vector<std::pair<std::string, Tensor>>;

std::string encode_checkpoint(const TensorEntries& entries);
TensorEntries decode_checkpoint(const std::string& bytes, const std::string& origin);

Tensor text_tensor(const std::string& text);
std::string tensor_text(const Tensor& t);

}  // namespace stldm
