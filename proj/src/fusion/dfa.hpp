#pragma once

#include <cstddef>
#include <vector>

#include "tensor/autodiff.hpp"
#include "tensor/tensor.hpp"

namespace stldm {

// Per-stage deformable alignment settings.
struct DfaStageConfig {
    std::size_t sampling_factor = 1;  // gamma
    double max_offset = 2.0;          // s_i, grid units
    std::size_t completion_range = 2; // R, square side in grid cells
    std::size_t heads = 1;
    double epsilon = 1.0;             // w_s = 1 / (d + epsilon)

    void validate(std::size_t height, std::size_t width) const;
};

// Stage 2..4 defaults: gamma {4,2,1}, s_i {8,4,2}, R {8,4,2}.
DfaStageConfig default_dfa_stage(std::size_t stage, std::size_t heads);

// Uniform gamma-strided query positions at cell centres, (row, col) order.
struct ReferenceGrid {
    std::size_t height = 0;        // H_i
    std::size_t width = 0;         // W_i
    std::size_t factor = 1;        // gamma
    std::size_t rows = 0;          // H_i / gamma
    std::size_t cols = 0;          // W_i / gamma
    Tensor points;                 // [rows*cols x 2]
    std::vector<std::size_t> anchors;  // raster index of each point's reference cell

    std::size_t count() const { return rows * cols; }
};

ReferenceGrid make_reference_grid(std::size_t height, std::size_t width, std::size_t factor);

// phi(I, p) for I = [H*W x C] at one fractional (row, col) point.
std::vector<double> bilinear_sample(const Tensor& grid, std::size_t height, std::size_t width, double row, double col);

// Raw [N x 3] offset-head output -> (dp = s*tanh(ch0..1), dm = sigmoid(ch2)).
struct OffsetField {
    ad::Var offsets;     // [N x 2] grid units, |dp| <= s_i
    ad::Var modulation;  // [N], in [0, 1]
};
OffsetField activate_offsets(const ad::Var& raw, double max_offset);

struct CompletionLayout {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::size_t> anchors;  // sampled rows' raster indices
    double range = 2.0;                // R
    double epsilon = 1.0;
    bool use_cardinality = true;       // false: modulation factor fixed at 1
};

struct CompletionStats {
    std::size_t fallback_rows = 0;     // unsampled rows with an empty neighbourhood
    double average_cardinality = 0.0;
};

// Fills unsampled rows of an [H*W x T] score matrix from sampled rows by
// inverse-distance weighting over deformed positions inside the R x R square,
// scaled by card / Avg(card).
ad::Var complete_attention(const ad::Var& sampled_scores, const ad::Var& positions, const CompletionLayout& layout,
                           CompletionStats* stats = nullptr);
Tensor complete_attention(const Tensor& sampled_scores, const Tensor& positions, const CompletionLayout& layout,
                          CompletionStats* stats = nullptr);

// Non-negative 2-D guidance map, normalised to max 1.
struct GuidanceMap {
    std::size_t height = 0;
    std::size_t width = 0;
    Tensor values;  // [height x width]
};

enum class KeyReduction { Mean, Max };

// Averages per-head [H*W x T] attention over heads, reduces over keys, and
// divides by the maximum. Differentiable form returns an [H*W] variable.
ad::Var guidance_from_attention(const std::vector<ad::Var>& per_head, KeyReduction keys = KeyReduction::Mean);
GuidanceMap extract_guidance_map(const std::vector<Tensor>& per_head, std::size_t height, std::size_t width,
                                 KeyReduction keys = KeyReduction::Mean);

}  // namespace stldm
