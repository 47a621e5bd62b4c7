#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "tensor/tensor.hpp"

namespace stldm {

struct TokenRange {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
    bool empty() const { return end <= begin; }
};

// Caption embedding L = [T_L x C_L] with its appearance (L_a) and spatial (L_s) slices.
struct TextEmbedding {
    Tensor data;
    std::vector<std::string> tokens;
    TokenRange appearance;
    TokenRange spatial;

    std::size_t length() const { return data.rows(); }
    std::size_t dim() const { return data.cols(); }
    Tensor appearance_part() const;
    Tensor spatial_part() const;
    // L + e_pos with sinusoidal encoding.
    Tensor with_positions() const;
};

Tensor rows_of(const Tensor& matrix, TokenRange range);

}  // namespace stldm
