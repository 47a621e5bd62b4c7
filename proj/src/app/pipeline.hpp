#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "app/model.hpp"
#include "data/metrics.hpp"
#include "data/scene.hpp"

namespace stldm {

struct Sample {
    std::string image_path;
    Image image;
    std::string caption;
    TextEmbedding text;
    GroundTruth truth;
    std::array<FeatureMap, 4> features;  // frozen backbone output, filled by encode_samples
};

std::vector<Sample> load_dataset(const std::filesystem::path& dir);
void encode_samples(Model& model, std::vector<Sample>& samples);

// Per-pixel BCE (or soft IoU) between G, bilinearly upsampled to the stage-2
// grid, and the rasterised ground-truth box.
ad::Var fusion_loss(const FusionOutput& out, const GroundTruth& truth, FusionLoss kind);

using EpochCallback = std::function<void(std::size_t epoch, double loss)>;

// One AdamW update per scene, order reshuffled from (seed, epoch). Resumes
// at model.epochs_done + 1 and stops after cfg.epochs.
std::vector<double> train_fusion(Model& model, const std::vector<Sample>& samples, const EpochCallback& on_epoch);
std::vector<double> train_reconstruction(Model& model, const std::vector<Sample>& samples, std::size_t epochs);
std::vector<double> train_denoiser(Model& model, const std::vector<Sample>& samples, std::size_t steps);

GuidanceMap guidance_for(Model& model, const Sample& sample);
BBox predict_box(Model& model, const Sample& sample);

// Commands. Each validates its inputs and writes outputs atomically.
std::size_t cmd_gen_data(const RunConfig& cfg);
std::vector<double> cmd_train(const RunConfig& cfg, const EpochCallback& on_epoch);

struct RunSummary {
    std::size_t guide_height = 0, guide_width = 0;
    std::size_t image_height = 0, image_width = 0;
    std::size_t guided_steps = 0;
    double final_energy = 0.0;
    double final_in_mask = 0.0;
};
RunSummary cmd_run(const RunConfig& cfg);
EvalReport cmd_eval(const RunConfig& cfg);
std::size_t cmd_dump_attention(const RunConfig& cfg);

std::string format_eval_report(const std::vector<std::string>& names, const EvalReport& report);

}  // namespace stldm
