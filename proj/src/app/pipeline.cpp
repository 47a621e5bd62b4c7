#include "app/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <algorithm>

#include "common/error.hpp"
#include "data/image_io.hpp"
#include "data/text_stub.hpp"

namespace stldm {

namespace fs = std::filesystem;

std::vector<Sample> load_dataset(const fs::path& dir) {
    const fs::path manifest = dir / kManifestName;
    if (!fs::exists(manifest)) fail(ErrorKind::Data, "dataset manifest not found: " + manifest.string());
    std::vector<Sample> samples;
    for (auto& entry : parse_manifest(read_file(manifest), manifest.string())) {
        Sample s;
        s.image_path = entry.image;
        const fs::path image_path = dir / entry.image;
        s.image = decode_ppm(read_file(image_path), image_path.string());
        s.caption = entry.caption;
        s.text = embed_text_stub(entry.caption);
        s.truth = entry.truth;
        samples.push_back(std::move(s));
    }
    return samples;
}

void encode_samples(Model& model, std::vector<Sample>& samples) {
    Binder frozen(false);
    for (auto& s : samples) s.features = model.autoencoder.backbone.forward(frozen, s.image);
}

ad::Var fusion_loss(const FusionOutput& out, const GroundTruth& truth, FusionLoss kind) {
    const std::size_t h = out.height, w = out.width, H = 4 * h, W = 4 * w;
    auto grid = ad::reshape(out.guidance, {h * w, 1});
    auto up = ad::reshape(ad::bilinear_sample(grid, h, w, ad::constant(resize_points(h, w, H, W))), {H * W});
    const Tensor target = rasterize_box(truth.box, H, W);
    if (kind == FusionLoss::Bce) return ad::bce_mean(up, target);
    auto inter = ad::sum(ad::mul(up, ad::constant(target)));
    auto uni = ad::add_scalar(ad::sub(ad::sum(up), inter), sum(target));
    return ad::add_scalar(ad::scale(ad::div(inter, uni), -1.0), 1.0);
}

namespace {

void step_all(NamedParameters& params, const AdamWOptions& options) {
    for (auto& [name, p] : params) {
        if (!p->trainable) continue;
        adamw_step(*p, options);
        p->zero_grad();
    }
}

void require_samples(const std::vector<Sample>& samples) {
    if (samples.empty()) fail(ErrorKind::Data, "dataset is empty");
}

}  // namespace

std::vector<double> train_fusion(Model& model, const std::vector<Sample>& samples, const EpochCallback& on_epoch) {
    require_samples(samples);
    const RunConfig& cfg = model.config;
    auto params = model.fusion_parameters();
    std::vector<double> losses;
    for (std::size_t epoch = model.epochs_done + 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(samples.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(mix_seed(cfg.seed, 1000 + epoch));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

        double total = 0.0;
        for (std::size_t idx : order) {
            const Sample& s = samples[idx];
            Binder bind(true);
            auto out = model.fusion.forward(bind, s.features, s.text);
            auto loss = fusion_loss(out, s.truth, cfg.loss);
            if (!std::isfinite(loss->value.item())) fail(ErrorKind::Numeric, "fusion loss is not finite");
            ad::backward(loss);
            bind.flush_gradients();
            step_all(params, cfg.optimizer);
            total += loss->value.item();
        }
        const double mean = total / static_cast<double>(samples.size());
        losses.push_back(mean);
        model.epochs_done = epoch;
        if (on_epoch) on_epoch(epoch, mean);
    }
    return losses;
}

std::vector<double> train_reconstruction(Model& model, const std::vector<Sample>& samples, std::size_t epochs) {
    require_samples(samples);
    const RunConfig& cfg = model.config;
    auto params = model.reconstruction_parameters();
    std::vector<double> losses;
    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
        double total = 0.0;
        for (const Sample& s : samples) {
            Binder bind(true);
            auto latent = model.autoencoder.latent_from_features(bind, s.features);
            auto pixels = model.autoencoder.decoder.forward(bind, latent);
            auto loss = ad::mse_mean(pixels, s.image.pixels.reshaped({s.image.pixels.size()}));
            if (cfg.kl_weight > 0.0) loss = ad::add(loss, ad::scale(ad::mean(ad::square(latent.data)), 0.5 * cfg.kl_weight));
            if (!std::isfinite(loss->value.item())) fail(ErrorKind::Numeric, "reconstruction loss is not finite");
            ad::backward(loss);
            bind.flush_gradients();
            step_all(params, cfg.optimizer);
            total += loss->value.item();
        }
        losses.push_back(total / static_cast<double>(samples.size()));
    }
    return losses;
}

std::vector<double> train_denoiser(Model& model, const std::vector<Sample>& samples, std::size_t steps) {
    if (steps == 0) return {};
    require_samples(samples);
    const RunConfig& cfg = model.config;
    const NoiseSchedule schedule = build_noise_schedule(cfg.diffusion_steps);
    Binder frozen(false);
    std::vector<FeatureMap> latents;
    std::vector<Tensor> texts;
    for (const Sample& s : samples) {
        latents.push_back(model.autoencoder.latent_from_features(frozen, s.features));
        texts.push_back(s.text.appearance_part());
    }
    auto params = model.denoiser_parameters();
    Rng rng(mix_seed(cfg.seed, 77));
    std::vector<double> losses;
    for (std::size_t step = 0; step < steps; ++step) {
        const std::size_t i = rng.below(samples.size());
        const std::size_t t = 1 + rng.below(cfg.diffusion_steps);
        const FeatureMap& z0 = latents[i];
        const Tensor eps = random_normal(z0.data->value.shape(), 1.0, rng);
        const double abar = schedule.alpha_bar_at(t);
        Tensor zt(z0.data->value.shape());
        for (std::size_t k = 0; k < zt.size(); ++k)
            zt[k] = std::sqrt(abar) * z0.data->value[k] + std::sqrt(1.0 - abar) * eps[k];
        Binder bind(true);
        auto out = model.denoiser.forward(bind, ad::constant(zt), z0.height, z0.width, t, texts[i]);
        auto loss = ad::mse_mean(out.noise, eps);
        if (!std::isfinite(loss->value.item())) fail(ErrorKind::Numeric, "denoiser loss is not finite");
        ad::backward(loss);
        bind.flush_gradients();
        step_all(params, cfg.optimizer);
        losses.push_back(loss->value.item());
    }
    return losses;
}

GuidanceMap guidance_for(Model& model, const Sample& sample) {
    Binder frozen(false);
    return model.fusion.forward(frozen, sample.features, sample.text).guidance_map();
}

BBox predict_box(Model& model, const Sample& sample) {
    return predicted_box_from_guidance(guidance_for(model, sample), model.config.guidance.beta_frac);
}

std::size_t cmd_gen_data(const RunConfig& cfg) {
    cfg.validate();
    const fs::path dir = cfg.out_dir;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
    std::vector<ManifestEntry> entries;
    for (std::size_t i = 0; i < cfg.scenes; ++i) {
        std::optional<Scene> scene;
        for (std::uint64_t attempt = 0; attempt < 10 && !scene; ++attempt) {
            try {
                scene = generate_scene(mix_seed(mix_seed(cfg.seed, i), attempt), cfg.image_size, cfg.objects);
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::Placement) throw;
            }
        }
        if (!scene) fail(ErrorKind::Placement, "scene " + std::to_string(i) + " could not be placed");
        char name[32];
        std::snprintf(name, sizeof name, "scene_%05zu.ppm", i);
        write_file_atomic(dir / name, encode_ppm(scene->image));
        entries.push_back(ManifestEntry{name, scene->caption, scene->truth()});
    }
    write_file_atomic(dir / kManifestName, format_manifest(entries));
    return entries.size();
}

std::vector<double> cmd_train(const RunConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    auto samples = load_dataset(cfg.data_dir);
    std::unique_ptr<Model> model;
    if (cfg.resume) {
        model = load_model(cfg, cfg.checkpoint_path());
    } else {
        model = std::make_unique<Model>(cfg);
    }
    encode_samples(*model, samples);
    if (model->epochs_done == 0) {
        train_reconstruction(*model, samples, cfg.recon_epochs);
        train_denoiser(*model, samples, cfg.denoiser_steps);
    }
    auto losses = train_fusion(*model, samples, on_epoch);
    save_model(*model, cfg.checkpoint_path());
    return losses;
}

namespace {

struct Prepared {
    std::unique_ptr<Model> model;
    Image image;
    TextEmbedding text;
};

Prepared prepare(const RunConfig& cfg) {
    cfg.validate();
    if (cfg.image.empty()) fail(ErrorKind::Config, "run.image is required");
    if (cfg.caption.empty()) fail(ErrorKind::Config, "run.caption is required");
    Prepared p;
    p.model = load_model(cfg, cfg.checkpoint_path());
    p.image = decode_ppm(read_file(cfg.image), cfg.image);
    if (p.image.height % 32 || p.image.width % 32) {
        fail(ErrorKind::Data, cfg.image + ": image sides must be multiples of 32, got " + std::to_string(p.image.width) +
                                  "x" + std::to_string(p.image.height));
    }
    p.text = embed_text_stub(cfg.caption);
    return p;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
}

}  // namespace

RunSummary cmd_run(const RunConfig& cfg) {
    Prepared p = prepare(cfg);
    Model& model = *p.model;
    const RunConfig& mc = model.config;
    Binder frozen(false);
    auto encoded = model.autoencoder.encode_image(frozen, p.image);
    const GuidanceMap g = model.fusion.forward(frozen, encoded.features, p.text).guidance_map();
    require_finite(g.values, "guidance map");

    const FeatureMap& latent = encoded.latent;
    const GuidanceMap resized = resize_guidance(g, latent.height, latent.width);
    const Tensor mask = guidance_mask(resized, mc.guidance);

    const NoiseSchedule schedule = build_noise_schedule(mc.diffusion_steps);
    Rng rng(mix_seed(mc.seed, 5));
    const double abar = schedule.alpha_bar_at(schedule.steps);
    LatentState z{latent.height, latent.width, schedule.steps, Tensor(latent.data->value.shape())};
    const Tensor eps = random_normal(z.z.shape(), 1.0, rng);
    for (std::size_t i = 0; i < z.z.size(); ++i)
        z.z[i] = std::sqrt(abar) * latent.data->value[i] + std::sqrt(1.0 - abar) * eps[i];

    const Tensor appearance = p.text.appearance_part();
    SampleResult sampled = sample_with_guidance(model.denoiser, z, mask, appearance, schedule, mc.guidance,
                                                mix_seed(mc.seed, 6));
    FeatureMap z0{latent.stage, latent.height, latent.width, ad::constant(sampled.z0.z)};
    const Image output = model.autoencoder.decode_latent(frozen, z0);
    require_finite(output.pixels, "decoded image");

    const fs::path out = cfg.out_dir;
    ensure_dir(out);
    write_file_atomic(out / "output.ppm", encode_ppm(output));
    write_file_atomic(out / "guidance.pgm", encode_pgm(to_gray(g)));
    std::ostringstream trace;
    write_trace(trace, sampled.trace);
    write_file_atomic(out / "trace.tsv", trace.str());

    RunSummary summary;
    summary.guide_height = g.height;
    summary.guide_width = g.width;
    summary.image_height = output.height;
    summary.image_width = output.width;
    summary.guided_steps = sampled.guided_steps;
    summary.final_energy = sampled.final_energy;
    summary.final_in_mask = sampled.final_in_mask;
    return summary;
}

std::string format_eval_report(const std::vector<std::string>& names, const EvalReport& report) {
    std::string out;
    char buf[256];
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        const auto& r = report.rows[i];
        std::snprintf(buf, sizeof buf, "\t%.6f\t%.6f\t%.6f\n", r.iou, r.size_score, r.dist_score);
        out += names.at(i) + buf;
    }
    std::snprintf(buf, sizeof buf, "mean\t%.6f\t%.6f\t%.6f\n", report.mean_iou, report.mean_size, report.mean_dist);
    return out + buf;
}

EvalReport cmd_eval(const RunConfig& cfg) {
    cfg.validate();
    auto model = load_model(cfg, cfg.checkpoint_path());
    auto samples = load_dataset(cfg.data_dir);
    encode_samples(*model, samples);
    std::vector<GroundTruth> truths;
    std::vector<BBox> predictions;
    std::vector<std::string> names;
    for (const auto& s : samples) {
        truths.push_back(s.truth);
        predictions.push_back(predict_box(*model, s));
        names.push_back(s.image_path);
    }
    EvalReport report = evaluate_batch(truths, predictions);
    ensure_dir(cfg.out_dir);
    write_file_atomic(fs::path(cfg.out_dir) / "eval.tsv", format_eval_report(names, report));
    return report;
}

std::size_t cmd_dump_attention(const RunConfig& cfg) {
    if (cfg.dump_stage < 1 || cfg.dump_stage > 4) {
        fail(ErrorKind::Config, "stage must be in 1..4, got " + std::to_string(cfg.dump_stage));
    }
    Prepared p = prepare(cfg);
    Model& model = *p.model;
    Binder frozen(false);
    auto features = model.autoencoder.backbone.forward(frozen, p.image);
    auto fused = model.fusion.forward(frozen, features, p.text);
    const AttentionResult& stage = fused.stages[cfg.dump_stage - 1];
    const std::size_t h = stage.output.height, w = stage.output.width;

    // Per-head maps share one scale so the averaged map is their mean.
    std::vector<Tensor> maps;
    double peak = 0.0;
    for (const auto& head : stage.spatial) {
        const Tensor& a = head->value;
        Tensor m({h, w});
        for (std::size_t i = 0; i < a.rows(); ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < a.cols(); ++j) acc += a.at(i, j);
            m[i] = acc / static_cast<double>(a.cols());
        }
        peak = std::max(peak, max_value(m));
        maps.push_back(std::move(m));
    }
    if (!(peak > 0.0)) fail(ErrorKind::Numeric, "attention maps are empty");
    Tensor mean({h, w});
    for (const auto& m : maps)
        for (std::size_t i = 0; i < m.size(); ++i) mean[i] += m[i] / static_cast<double>(maps.size());

    const fs::path dir = fs::path(cfg.out_dir) / "attention";
    ensure_dir(dir);
    auto write = [&](const Tensor& m, const std::string& name) {
        GuidanceMap normalised{h, w, scaled(m, 1.0 / peak)};
        write_file_atomic(dir / name, encode_pgm(to_gray(normalised)));
    };
    const std::string prefix = "stage" + std::to_string(cfg.dump_stage);
    for (std::size_t j = 0; j < maps.size(); ++j) write(maps[j], prefix + "_head" + std::to_string(j) + ".pgm");
    write(mean, prefix + "_mean.pgm");
    return maps.size() + 1;
}

}  // namespace stldm
