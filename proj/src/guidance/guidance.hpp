#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "fusion/dfa.hpp"
#include "guidance/denoiser.hpp"

namespace stldm {

enum class DilationMode { BoundingBox, Morphological };

struct GuidanceConfig {
    double eta = 35.0;
    std::size_t guided_steps = 10;
    std::size_t repeats = 3;
    double beta_frac = 0.5;
    double retry_beta_frac = 0.25;
    DilationMode dilation = DilationMode::BoundingBox;
    std::size_t morph_kernel = 3;
    bool enabled = true;     // false: no guidance at all
    bool activation = true;  // false: soft mask = resized G
    bool dilate = true;      // false: threshold only

    void validate(std::size_t steps) const;
};

// Source-grid sample points for a half-pixel-centred resize, clamped to the
// grid; [dst_h*dst_w x 2] (row, col).
Tensor resize_points(std::size_t src_h, std::size_t src_w, std::size_t dst_h, std::size_t dst_w);

// Bilinear resize (half-pixel centres, edge clamped) followed by max renormalisation.
GuidanceMap resize_guidance(const GuidanceMap& g, std::size_t height, std::size_t width);

// Threshold at beta_frac * max, then fill the bounding rectangle or dilate
// with a k x k square. Returns a flat [h*w] mask of 0/1.
Tensor activate_and_dilate(const GuidanceMap& g, double beta_frac, DilationMode mode, std::size_t kernel = 3,
                           bool dilate = true);

// Applies the configured activation policy, retrying once at the lower
// threshold when the first pass comes back empty.
Tensor guidance_mask(const GuidanceMap& resized, const GuidanceConfig& cfg);

// E = (1 - sum(mask * S) / sum(S))^2, mask broadcast across keys.
double energy(const Tensor& attention, const Tensor& mask);
ad::Var energy(const ad::Var& attention, const Tensor& mask);
// sum(mask * S) / sum(S)
double in_mask_fraction(const Tensor& attention, const Tensor& mask);

// d E / d z_t for the denoiser's appearance attention at step t.
Tensor energy_gradient(ToyDenoiser& denoiser, const LatentState& z, const Tensor& appearance_text,
                       const Tensor& mask, double* energy_value = nullptr);

// `repeats` steps of z <- z - eta * sqrt((1 - abar_t) / abar_t) * grad E.
LatentState guided_latent_update(ToyDenoiser& denoiser, const LatentState& z, const Tensor& mask,
                                 const Tensor& appearance_text, const NoiseSchedule& schedule,
                                 const GuidanceConfig& cfg);

struct TraceRow {
    std::size_t step = 0;
    double energy_before = 0.0;
    double energy_after = 0.0;
    double in_mask = 0.0;
};

struct SampleResult {
    LatentState z0;
    std::vector<TraceRow> trace;
    std::size_t guided_steps = 0;
    double final_energy = 0.0;
    double final_in_mask = 0.0;
};

// Ancestral sampling from z_T. All per-step noise is drawn from `seed` up
// front, so runs that differ only in guidance see identical noise.
SampleResult sample_with_guidance(ToyDenoiser& denoiser, const LatentState& z_T, const Tensor& mask,
                                  const Tensor& appearance_text, const NoiseSchedule& schedule,
                                  const GuidanceConfig& cfg, std::uint64_t seed);

void write_trace(std::ostream& os, const std::vector<TraceRow>& trace);

}  // namespace stldm
