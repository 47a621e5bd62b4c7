#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "tensor/autodiff.hpp"
#include "tensor/nn.hpp"
#include "tensor/tensor.hpp"

namespace stldm {

// RGB image, pixels stored as [H x W x 3] in [0, 1].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    Tensor pixels;

    Image() = default;
    Image(std::size_t h, std::size_t w, double fill = 0.0);
};

// Stage-wise feature grid; `data` is [height*width x channels], raster order.
struct FeatureMap {
    std::size_t stage = 1;
    std::size_t height = 0;
    std::size_t width = 0;
    ad::Var data;

    std::size_t channels() const { return data->value.cols(); }
    std::size_t tokens() const { return height * width; }
};

struct BackboneConfig {
    std::array<std::size_t, 4> channels{32, 64, 128, 256};
    std::array<std::size_t, 4> depths{2, 2, 6, 2};
    std::array<std::size_t, 4> heads{2, 4, 8, 16};
    std::size_t window = 7;
    std::size_t mlp_ratio = 4;

    // Channel/head schedule of the tiny hierarchical transformer.
    static BackboneConfig reference();
    void validate() const;
};

// Index maps shared by the rearranging layers; -1 marks zero padding.
namespace layout {

// [H x W x 3] pixels -> [(H/p)(W/p) x p*p*3] patch vectors, (dy, dx, rgb) order.
std::vector<std::ptrdiff_t> patch_partition(std::size_t height, std::size_t width, std::size_t patch,
                                            std::size_t channels);
// Inverse of patch_partition.
std::vector<std::ptrdiff_t> patch_unpartition(std::size_t height, std::size_t width, std::size_t patch,
                                              std::size_t channels);
// [H*W x C] -> window-major [nWin*wh*ww x C], zero padded to window multiples.
struct Windows {
    std::size_t window_h = 0, window_w = 0, count = 0;
    std::vector<std::ptrdiff_t> partition;  // padded window tokens <- grid
    std::vector<std::ptrdiff_t> restore;    // grid <- padded window tokens
};
Windows windows(std::size_t height, std::size_t width, std::size_t channels, std::size_t window);
// [H*W x C] -> [(H/2)(W/2) x 4C]; each 2x2 neighbourhood concatenated.
std::vector<std::ptrdiff_t> merge_2x2(std::size_t height, std::size_t width, std::size_t channels);

}  // namespace layout

// 4x4 non-overlapping patches then a linear map to C_1.
class PatchPartition {
public:
    PatchPartition() = default;
    PatchPartition(std::size_t out_channels, Rng& rng);

    FeatureMap forward(Binder& bind, const Image& image);
    void collect(NamedParameters& out, const std::string& prefix);

    Linear embed;
};

// Window multi-head self-attention block with pre-norm and residual MLP.
class WindowBlock {
public:
    WindowBlock() = default;
    WindowBlock(std::size_t channels, std::size_t heads, std::size_t window, std::size_t mlp_ratio, Rng& rng);

    // x + proj(attention(LN(x))) only.
    ad::Var attention_branch(Binder& bind, const ad::Var& x, std::size_t height, std::size_t width);
    FeatureMap forward(Binder& bind, const FeatureMap& f);
    void collect(NamedParameters& out, const std::string& prefix);

    std::size_t heads = 1;
    std::size_t window = 7;
    LayerNorm norm;
    Linear qkv;
    Linear proj;
    FeedForward mlp;
};

// Concatenate 2x2 neighbourhoods (4C) and map linearly to 2C.
class PatchMerging {
public:
    PatchMerging() = default;
    PatchMerging(std::size_t channels, Rng& rng);

    FeatureMap forward(Binder& bind, const FeatureMap& f);
    void collect(NamedParameters& out, const std::string& prefix);

    Linear reduce;
};

// H x W x C_i -> 4H x 4W x C_t: linear to 16 C_t, then a 4x4 rearrange.
class PatchExpand {
public:
    PatchExpand() = default;
    PatchExpand(std::size_t in_channels, std::size_t target_channels, Rng& rng);

    // Returns the expanded map as [(4H)(4W) x C_t].
    ad::Var forward(Binder& bind, const FeatureMap& f);
    void collect(NamedParameters& out, const std::string& prefix);

    std::size_t target_channels = 0;
    Linear linear;
};

struct EncodedImage {
    FeatureMap latent;                    // (H/f) x (W/f) x C_t
    std::array<FeatureMap, 4> features;   // V_1..V_4
};

class Backbone {
public:
    Backbone() = default;
    Backbone(const BackboneConfig& config, Rng& rng);

    std::array<FeatureMap, 4> forward(Binder& bind, const Image& image);
    void collect(NamedParameters& out, const std::string& prefix);

    BackboneConfig config;
    PatchPartition partition;
    std::array<std::vector<WindowBlock>, 4> stages;
    std::array<PatchMerging, 3> merges;
    std::array<LayerNorm, 4> out_norms;
};

// Stage index (1-based) feeding the latent for downsampling factor f.
std::size_t stage_for_factor(std::size_t factor);

// Mirror of the encoder: latent -> 4x4 un-expand -> reversed merges -> pixels.
class Decoder {
public:
    Decoder() = default;
    Decoder(const BackboneConfig& config, std::size_t factor, std::size_t latent_channels, Rng& rng);

    Image forward_image(Binder& bind, const FeatureMap& latent);
    // Pixels as an [H*W*3] variable, clamped to [0, 1].
    ad::Var forward(Binder& bind, const FeatureMap& latent);
    void collect(NamedParameters& out, const std::string& prefix);

    std::size_t factor = 4;
    std::size_t latent_channels = 3;
    std::size_t top_stage = 3;
    Linear unexpand;                 // 16 C_t -> C_top
    std::vector<Linear> expands;     // C -> 2C, rearranged to 2x2 of C/2
    std::vector<FeedForward> blocks; // token-wise refinement after each expand
    FeedForward top_block;
    Linear to_pixels;                // C_1 -> 48, rearranged to 4x4x3
};

struct AutoencoderConfig {
    BackboneConfig backbone;
    std::size_t factor = 4;          // f in {2, 4, 8}
    std::size_t latent_channels = 3; // C_t
};

class Autoencoder {
public:
    Autoencoder() = default;
    Autoencoder(const AutoencoderConfig& config, Rng& rng);

    EncodedImage encode_image(Binder& bind, const Image& image);
    FeatureMap latent_from_features(Binder& bind, const std::array<FeatureMap, 4>& features);
    Image decode_latent(Binder& bind, const FeatureMap& latent);
    void collect(NamedParameters& out, const std::string& prefix);

    AutoencoderConfig config;
    Backbone backbone;
    PatchExpand expand;
    Decoder decoder;
};

void validate_autoencoder_config(const AutoencoderConfig& config);

}  // namespace stldm
