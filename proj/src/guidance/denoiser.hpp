#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "tensor/autodiff.hpp"
#include "tensor/nn.hpp"

namespace stldm {

// Linear beta schedule; index t runs 1..T, stored at t-1.
struct NoiseSchedule {
    std::size_t steps = 0;
    std::vector<double> beta;
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // cumulative product

    double beta_at(std::size_t t) const { return beta.at(t - 1); }
    double alpha_at(std::size_t t) const { return alpha.at(t - 1); }
    double alpha_bar_at(std::size_t t) const { return alpha_bar.at(t - 1); }
};

NoiseSchedule build_noise_schedule(std::size_t steps, double beta_start = 1e-4, double beta_end = 0.02);

// Latent grid z_t stored as [h*w x c].
struct LatentState {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t timestep = 0;
    Tensor z;

    std::size_t channels() const { return z.cols(); }
};

struct DenoiserConfig {
    std::size_t latent_channels = 3;
    std::size_t width = 32;       // full-resolution feature width
    std::size_t mid_width = 64;   // after the 2x2 down block
    std::size_t text_dim = 64;
    std::size_t heads = 2;
    std::size_t steps = 50;       // T, also sizes the time embedding table

    void validate() const;
};

struct DenoiserOutput {
    ad::Var noise;                      // [h*w x c]
    std::vector<ad::Var> head_weights;  // per head [h*w x (1 + T_a)], rows sum to 1; column 0 is the sink
    ad::Var appearance;                 // head-averaged weights on the L_a columns, [h*w x T_a]
};

// Minimal U-shape: in-projection with time embedding, one 2x2 down block,
// a middle block, nearest up-sampling with a skip, then the up block's
// cross-attention over L_a whose weights are S_t.
class ToyDenoiser {
public:
    ToyDenoiser() = default;
    ToyDenoiser(const DenoiserConfig& config, Rng& rng);

    DenoiserOutput forward(Binder& bind, const ad::Var& z, std::size_t height, std::size_t width, std::size_t t,
                           const Tensor& appearance_text);
    void collect(NamedParameters& out, const std::string& prefix);

    DenoiserConfig config;
    Linear in;
    Linear time;
    Linear down;
    FeedForward mid;
    Linear up;
    LayerNorm norm;
    Linear query;
    Linear key;
    Linear value;
    Parameter sink_key;    // [1 x width], start-of-text style key absorbing spare attention
    Parameter sink_value;  // [1 x width]
    Linear attn_out;
    FeedForward tail;
    Linear out;
};

}  // namespace stldm
