#include <cstdio>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "stldm/stldm.h"

namespace {

using ConfigPtr = std::unique_ptr<stldm_config, decltype(&stldm_config_destroy)>;

int report(stldm_status st, const char* verb) {
    if (st == STLDM_OK) return 0;
    std::fprintf(stderr, "stldm %s: %s: %s\n", verb, stldm_status_name(st), stldm_last_error());
    return stldm_exit_code(st);
}

struct Options {
    std::string config_path;
    std::vector<std::string> sets;
    std::vector<std::pair<std::string, std::string>> pinned;  // flag-derived key/values, applied last
};

void on_epoch(size_t epoch, double loss, void*) {
    std::printf("%zu\t%.9f\n", epoch, loss);
    std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"stldm: spatial text-grounded latent diffusion toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_help_all_flag("--help-all");

    Options opt;
    std::string seed, out, dataset, checkpoint, image, caption, stage, dfa_stages;
    bool resume = false, no_offsets = false, no_scalar = false, no_card = false;
    bool no_guidance = false, no_activation = false, no_dilation = false;

    app.add_option("--config", opt.config_path, "key = value configuration file")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "master seed");
    app.add_option("--out", out, "output directory");
    app.add_option("--set", opt.sets, "override a configuration key (key=value), repeatable");
    app.add_option("--checkpoint", checkpoint, "checkpoint path (default <out>/model.ckpt)");
    app.add_option("--dfa-stages", dfa_stages, "stages using deformable alignment, e.g. 2,3,4 or none");
    app.add_flag("--no-offsets", no_offsets, "zero the learned offsets");
    app.add_flag("--no-scalar", no_scalar, "fix the modulation scalar at 1");
    app.add_flag("--no-card", no_card, "drop the cardinality factor in completion");
    app.add_flag("--no-guidance", no_guidance, "sample without the energy guidance");
    app.add_flag("--no-activation", no_activation, "use the raw guidance map as a soft mask");
    app.add_flag("--no-dilation", no_dilation, "threshold the guidance map without dilation");

    auto* gen = app.add_subcommand("gen-data", "write synthetic scenes and a manifest to --out");
    auto* train = app.add_subcommand("train", "train the model on a dataset and write a checkpoint");
    train->add_option("--dataset", dataset, "dataset directory")->required();
    train->add_flag("--resume", resume, "continue from the existing checkpoint");
    auto* run = app.add_subcommand("run", "generate with guidance for one image and caption");
    run->add_option("--image", image, "input PPM")->required();
    run->add_option("--caption", caption, "caption, spatial part in brackets")->required();
    auto* eval = app.add_subcommand("eval", "score predicted boxes on a dataset");
    eval->add_option("--dataset", dataset, "dataset directory")->required();
    auto* dump = app.add_subcommand("dump-attn", "write per-head attention maps as PGM");
    dump->add_option("--image", image, "input PPM")->required();
    dump->add_option("--caption", caption, "caption, spatial part in brackets")->required();
    dump->add_option("--stage", stage, "fusion stage 1-4")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    stldm_config* raw = nullptr;
    if (stldm_config_create(&raw) != STLDM_OK) return report(STLDM_ERR_INTERNAL, "config");
    ConfigPtr cfg(raw, &stldm_config_destroy);

    auto set = [&](const std::string& key, const std::string& value) {
        return stldm_config_set(cfg.get(), key.c_str(), value.c_str());
    };
    if (!opt.config_path.empty()) {
        if (auto st = stldm_config_load(cfg.get(), opt.config_path.c_str()); st != STLDM_OK) return report(st, "config");
    }
    for (const auto& kv : opt.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            std::fprintf(stderr, "stldm: --set expects key=value, got '%s'\n", kv.c_str());
            return 1;
        }
        if (auto st = set(kv.substr(0, eq), kv.substr(eq + 1)); st != STLDM_OK) return report(st, "config");
    }

    auto& p = opt.pinned;
    if (!seed.empty()) p.emplace_back("seed", seed);
    if (!out.empty()) p.emplace_back("paths.out", out);
    if (!checkpoint.empty()) p.emplace_back("paths.checkpoint", checkpoint);
    if (!dataset.empty()) p.emplace_back("data.dir", dataset);
    if (!image.empty()) p.emplace_back("run.image", image);
    if (!caption.empty()) p.emplace_back("run.caption", caption);
    if (!stage.empty()) p.emplace_back("dump.stage", stage);
    if (!dfa_stages.empty()) p.emplace_back("dfa.stages", dfa_stages);
    if (resume) p.emplace_back("train.resume", "true");
    if (no_offsets) p.emplace_back("dfa.offsets", "false");
    if (no_scalar) p.emplace_back("dfa.scalar", "false");
    if (no_card) p.emplace_back("dfa.card", "false");
    if (no_guidance) p.emplace_back("guidance.enabled", "false");
    if (no_activation) p.emplace_back("guidance.activation", "false");
    if (no_dilation) p.emplace_back("guidance.dilate", "false");
    for (const auto& [k, v] : p) {
        if (auto st = set(k, v); st != STLDM_OK) return report(st, "config");
    }

    if (gen->parsed()) {
        size_t n = 0;
        if (auto st = stldm_gen_data(cfg.get(), &n); st != STLDM_OK) return report(st, "gen-data");
        std::printf("%zu\n", n);
    } else if (train->parsed()) {
        if (auto st = stldm_train(cfg.get(), on_epoch, nullptr); st != STLDM_OK) return report(st, "train");
    } else if (run->parsed()) {
        stldm_run_summary s{};
        if (auto st = stldm_run(cfg.get(), &s); st != STLDM_OK) return report(st, "run");
        std::printf("guidance %zux%zu\nimage %zux%zu\nguided_steps %zu\nfinal_energy %.9f\nfinal_in_mask %.9f\n",
                    s.guide_height, s.guide_width, s.image_height, s.image_width, s.guided_steps, s.final_energy,
                    s.final_in_mask);
    } else if (eval->parsed()) {
        stldm_eval_summary s{};
        if (auto st = stldm_eval(cfg.get(), &s); st != STLDM_OK) return report(st, "eval");
        std::printf("scenes %zu\niou %.6f\nsize %.6f\ndist %.6f\n", s.scenes, s.mean_iou, s.mean_size, s.mean_dist);
    } else if (dump->parsed()) {
        size_t n = 0;
        if (auto st = stldm_dump_attention(cfg.get(), &n); st != STLDM_OK) return report(st, "dump-attn");
        std::printf("%zu\n", n);
    }
    return 0;
}
