#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "backbone/backbone.hpp"
#include "fusion/fusion.hpp"
#include "guidance/denoiser.hpp"
#include "guidance/guidance.hpp"
#include "tensor/nn.hpp"

namespace stldm {

enum class FusionLoss { Bce, SoftIou };

struct RunConfig {
    std::uint64_t seed = 1;

    std::size_t image_size = 128;
    std::size_t scenes = 200;
    std::size_t objects = 3;
    std::string data_dir = "data";

    AutoencoderConfig autoencoder;
    std::size_t offset_dim = 32;
    std::size_t offset_heads = 2;
    DfaFlags dfa;
    double dfa_epsilon = 1.0;

    std::size_t epochs = 20;
    AdamWOptions optimizer;
    FusionLoss loss = FusionLoss::Bce;
    std::size_t recon_epochs = 0;
    double kl_weight = 1e-6;
    std::size_t denoiser_steps = 500;
    bool resume = false;

    std::size_t diffusion_steps = 50;
    std::size_t denoiser_width = 32;
    std::size_t denoiser_mid_width = 64;
    std::size_t denoiser_heads = 2;
    GuidanceConfig guidance;

    std::string out_dir = "out";
    std::string checkpoint;   // empty: <out>/model.ckpt
    std::string image;        // run / dump-attn input
    std::string caption;
    std::size_t dump_stage = 4;

    std::filesystem::path checkpoint_path() const;
    FusionConfig fusion_config() const;
    DenoiserConfig denoiser_config() const;
    void validate() const;
};

// Every accepted key, in canonical order.
const std::vector<std::string>& config_keys();

// Throws Config on unknown keys or malformed values.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& cfg, const std::string& key);

// "key = value" lines, '#' comments, blank lines ignored.
void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin);
RunConfig load_config_file(const std::filesystem::path& path);
std::string format_config(const RunConfig& cfg);

// Keys that fix the trained model's structure; restored from checkpoints.
bool is_model_key(const std::string& key);

}  // namespace stldm
