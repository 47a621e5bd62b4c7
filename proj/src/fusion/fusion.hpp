#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "backbone/backbone.hpp"
#include "fusion/dfa.hpp"
#include "fusion/text.hpp"
#include "tensor/nn.hpp"

namespace stldm {

// Output of one multimodal attention stage.
struct AttentionResult {
    FeatureMap output;                // fused map, residual included
    std::vector<ad::Var> attention;   // per head [H*W x T], softmax over keys
    std::vector<ad::Var> spatial;     // per head [H*W x T], softmax over positions
    ad::Var aggregated;               // heads concatenated, before the output map
};

// Multi-head cross-attention of grid queries against text keys/values.
class CrossAttention {
public:
    CrossAttention() = default;
    CrossAttention(std::size_t channels, std::size_t text_dim, std::size_t heads, Rng& rng);

    // Plain fusion: softmax(Q K^T / sqrt(d)) V, output map, residual.
    AttentionResult forward(Binder& bind, const FeatureMap& m, const ad::Var& text);

    // Scaled per-head scores for precomputed queries [N x C].
    std::vector<ad::Var> head_scores(Binder& bind, const ad::Var& queries, const ad::Var& text);
    // Softmax over keys, value aggregation, output map and residual on m.
    AttentionResult finish(Binder& bind, const FeatureMap& m, const std::vector<ad::Var>& scores, const ad::Var& text);
    void collect(NamedParameters& out, const std::string& prefix);

    std::size_t heads = 1;
    Linear query;
    Linear key;
    Linear value;
    Linear out;
};

enum class AttentionMode { Full, TransformerOnly, CrossOnly };

struct TransformerInputs {
    bool multimodal = true;  // M_i
    bool visual = true;      // V_i
    bool text = true;        // L
};

struct DfaFlags {
    std::array<bool, 4> enabled{false, true, true, true};
    bool offsets = true;     // false: dp == 0
    bool scalar = true;      // false: dm == 1
    bool cardinality = true; // false: completion modulation factor == 1
    AttentionMode mode = AttentionMode::Full;
    TransformerInputs inputs;
    KeyReduction keys = KeyReduction::Mean;
};

// Joint transformer over [M_i ; V_i ; L] producing offsets and modulation.
class OffsetGenerator {
public:
    OffsetGenerator() = default;
    OffsetGenerator(std::size_t channels, std::size_t text_dim, std::size_t dim, std::size_t heads, Rng& rng);

    struct Output {
        ad::Var raw;            // [(H/g)(W/g) x 3] pre-activation
        ad::Var grid_tokens;    // [H*W x dim] transformer outputs at grid positions
        ad::Var grid_queries;   // [H*W x dim] attention queries of grid tokens
        ad::Var text_keys;      // [T_L x dim] attention keys of text tokens (empty if no text)
    };

    Output forward(Binder& bind, const FeatureMap& m, const FeatureMap& v, const Tensor& text_with_positions,
                   std::size_t factor, const TransformerInputs& inputs);
    void collect(NamedParameters& out, const std::string& prefix);

    std::size_t dim = 32;
    std::size_t heads = 2;
    Linear from_multimodal;
    Linear from_visual;
    Linear from_text;
    LayerNorm norm;
    Linear qkv;
    Linear proj;
    FeedForward mlp;
    Linear head;        // dim -> 3
    Linear grid_out;    // dim -> C_i, transformer-only ablation
};

struct StageTrace {
    std::optional<OffsetField> offsets;
    std::optional<ReferenceGrid> grid;
    CompletionStats completion;
};

// Stage 2..4 fusion: deformable alignment or plain cross-attention.
class FusionStage {
public:
    FusionStage() = default;
    FusionStage(std::size_t stage, std::size_t channels, std::size_t text_dim, std::size_t offset_dim,
                std::size_t offset_heads, const DfaStageConfig& config, Rng& rng);

    AttentionResult dfa(Binder& bind, const FeatureMap& m, const FeatureMap& v, const ad::Var& spatial_text,
                        const TextEmbedding& text, const DfaFlags& flags, StageTrace* trace = nullptr);
    AttentionResult plain(Binder& bind, const FeatureMap& m, const ad::Var& spatial_text);
    void collect(NamedParameters& out, const std::string& prefix);

    std::size_t stage = 2;
    DfaStageConfig config;
    CrossAttention cross;
    OffsetGenerator offsets;

private:
    AttentionResult transformer_only(Binder& bind, const FeatureMap& m, const OffsetGenerator::Output& gen,
                                     const TextEmbedding& text);
};

struct FusionConfig {
    std::array<std::size_t, 4> channels{32, 64, 128, 256};
    std::array<std::size_t, 4> heads{2, 4, 8, 16};
    std::size_t text_dim = 64;
    std::size_t offset_dim = 32;
    std::size_t offset_heads = 2;
    std::array<DfaStageConfig, 3> stages{};  // stages 2..4
    double epsilon = 1.0;
    DfaFlags flags;

    static FusionConfig from_backbone(const BackboneConfig& backbone);
    void validate() const;
};

struct FusionOutput {
    ad::Var guidance;  // [H_4 * W_4], normalised to max 1
    std::size_t height = 0;
    std::size_t width = 0;
    std::array<AttentionResult, 4> stages;
    std::array<StageTrace, 4> traces;

    GuidanceMap guidance_map() const;
};

class FusionModel {
public:
    FusionModel() = default;
    FusionModel(const FusionConfig& config, Rng& rng);

    FusionOutput forward(Binder& bind, const std::array<FeatureMap, 4>& features, const TextEmbedding& text);
    void collect(NamedParameters& out, const std::string& prefix);

    FusionConfig config;
    CrossAttention first;                 // stage 1, plain cross-attention
    std::array<PatchMerging, 3> merges;   // M_{i-1} -> M_i
    std::array<FusionStage, 3> stages;    // stages 2..4
};

}  // namespace stldm
