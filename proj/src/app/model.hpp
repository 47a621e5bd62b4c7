#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include "app/config.hpp"

namespace stldm {

// Everything a checkpoint holds: autoencoder, fusion branch, toy denoiser.
class Model {
public:
    explicit Model(const RunConfig& config);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    NamedParameters parameters();
    NamedParameters fusion_parameters();
    NamedParameters reconstruction_parameters();  // patch expand + decoder
    NamedParameters denoiser_parameters();

    RunConfig config;
    Autoencoder autoencoder;
    FusionModel fusion;
    ToyDenoiser denoiser;
    std::size_t epochs_done = 0;
};

void save_model(Model& model, const std::filesystem::path& path);

// Structural keys (model.*, dfa.*, denoiser.*, diffusion.steps) come from the
// checkpoint; everything else from `current`.
std::unique_ptr<Model> load_model(const RunConfig& current, const std::filesystem::path& path);

// FNV-1a over the raw bytes of every parameter value.
std::uint64_t parameter_checksum(const NamedParameters& params);

}  // namespace stldm
