#include "app/model.hpp"

#include <bit>
#include <map>
#include <memory>

#include "app/checkpoint.hpp"
#include "common/error.hpp"
#include "data/image_io.hpp"

namespace stldm {

namespace {

Autoencoder make_autoencoder(const RunConfig& cfg) {
    Rng rng(mix_seed(cfg.seed, 1));
    return Autoencoder(cfg.autoencoder, rng);
}

FusionModel make_fusion(const RunConfig& cfg) {
    Rng rng(mix_seed(cfg.seed, 2));
    return FusionModel(cfg.fusion_config(), rng);
}

ToyDenoiser make_denoiser(const RunConfig& cfg) {
    Rng rng(mix_seed(cfg.seed, 3));
    return ToyDenoiser(cfg.denoiser_config(), rng);
}

const RunConfig& validated(const RunConfig& cfg) {
    cfg.validate();
    return cfg;
}

}  // namespace

Model::Model(const RunConfig& cfg)
    : config(validated(cfg)),
      autoencoder(make_autoencoder(cfg)),
      fusion(make_fusion(cfg)),
      denoiser(make_denoiser(cfg)) {}

NamedParameters Model::parameters() {
    NamedParameters out;
    autoencoder.collect(out, "ae");
    fusion.collect(out, "fusion");
    denoiser.collect(out, "denoiser");
    return out;
}

NamedParameters Model::fusion_parameters() {
    NamedParameters out;
    fusion.collect(out, "fusion");
    return out;
}

NamedParameters Model::reconstruction_parameters() {
    NamedParameters out;
    autoencoder.expand.collect(out, "ae.expand");
    autoencoder.decoder.collect(out, "ae.decoder");
    return out;
}

NamedParameters Model::denoiser_parameters() {
    NamedParameters out;
    denoiser.collect(out, "denoiser");
    return out;
}

void save_model(Model& model, const std::filesystem::path& path) {
    TensorEntries entries;
    entries.emplace_back("meta/config", text_tensor(format_config(model.config)));
    entries.emplace_back("meta/epochs_done", Tensor::scalar(static_cast<double>(model.epochs_done)));
    for (auto& [name, p] : model.parameters()) {
        entries.emplace_back(name, p->value);
        entries.emplace_back(name + ".adam_m", p->first_moment);
        entries.emplace_back(name + ".adam_v", p->second_moment);
        entries.emplace_back(name + ".adam_step", Tensor::scalar(static_cast<double>(p->step)));
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    write_file_atomic(path, encode_checkpoint(entries));
}

std::unique_ptr<Model> load_model(const RunConfig& current, const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) fail(ErrorKind::Data, "checkpoint not found: " + path.string());
    auto entries = decode_checkpoint(read_file(path), path.string());
    std::map<std::string, Tensor> by_name;
    for (auto& [name, t] : entries) by_name.emplace(name, std::move(t));

    auto meta = by_name.find("meta/config");
    if (meta == by_name.end()) fail(ErrorKind::Data, path.string() + ": checkpoint lacks meta/config");
    RunConfig stored;
    apply_config_text(stored, tensor_text(meta->second), path.string() + "#meta/config");
    RunConfig cfg = current;
    for (const auto& key : config_keys())
        if (is_model_key(key)) set_config_value(cfg, key, get_config_value(stored, key));
    cfg.seed = stored.seed;

    auto model = std::make_unique<Model>(cfg);
    if (auto it = by_name.find("meta/epochs_done"); it != by_name.end()) {
        model->epochs_done = static_cast<std::size_t>(it->second.item());
    }
    auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor& {
        auto it = by_name.find(name);
        if (it == by_name.end()) fail(ErrorKind::Data, path.string() + ": missing tensor " + name);
        if (it->second.shape() != shape) {
            fail(ErrorKind::Data, path.string() + ": tensor " + name + " has shape " +
                                      shape_to_string(it->second.shape()) + ", model expects " + shape_to_string(shape));
        }
        return it->second;
    };
    for (auto& [name, p] : model->parameters()) {
        p->value = fetch(name, p->value.shape());
        p->first_moment = fetch(name + ".adam_m", p->value.shape());
        p->second_moment = fetch(name + ".adam_v", p->value.shape());
        p->step = static_cast<std::size_t>(fetch(name + ".adam_step", {1}).item());
        p->zero_grad();
    }
    return model;
}

std::uint64_t parameter_checksum(const NamedParameters& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, p] : params)
        for (double v : p->value.values()) {
            const auto bits = std::bit_cast<std::uint64_t>(v);
            for (int i = 0; i < 8; ++i) {
                h ^= (bits >> (8 * i)) & 0xff;
                h *= 0x100000001b3ULL;
            }
        }
    return h;
}

}  // namespace stldm
