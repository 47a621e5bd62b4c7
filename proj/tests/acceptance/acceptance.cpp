// End-to-end acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "app/pipeline.hpp"
#include "common/error.hpp"
#include "data/image_io.hpp"
#include "data/text_stub.hpp"
#include "oracles.hpp"

using namespace stldm;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kDegeneracyTol = 1e-9;
constexpr double kOracleTol = 1e-12;
constexpr double kGradientTol = 1e-3;
constexpr double kEnergyScaleTol = 1e-14;  // c*S rounds per entry; sums of up to 64 terms
constexpr int kGuidanceRuns = 100;
constexpr int kGuidanceWins = 90;
constexpr double kLossDrop = 0.5;
constexpr double kIouMargin = 0.15;

constexpr double kBudgetDegeneracy = 60.0;
constexpr double kBudgetGradients = 300.0;
constexpr double kBudgetGuidance = 600.0;
constexpr double kBudgetTraining = 1800.0;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

Tensor normal(const Shape& shape, Rng& rng, double sd = 1.0) { return random_normal(shape, sd, rng); }
std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

FeatureMap grid_map(std::size_t stage, std::size_t h, std::size_t w, Tensor data) {
    FeatureMap f;
    f.stage = stage;
    f.height = h;
    f.width = w;
    f.data = ad::constant(std::move(data));
    return f;
}

TextEmbedding random_text(std::size_t appearance, std::size_t spatial, std::size_t dim, Rng& rng) {
    TextEmbedding t;
    t.data = normal({appearance + spatial, dim}, rng);
    t.tokens.assign(appearance + spatial, "w");
    t.appearance = {0, appearance};
    t.spatial = {appearance, appearance + spatial};
    return t;
}

double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        scale += a[i] * a[i] + b[i] * b[i];
    }
    return std::sqrt(diff) / std::max(std::sqrt(scale), 1e-10);
}

// 1. DFA with zero offsets, unit modulation and gamma 1 is plain cross-attention.
Outcome degeneracy() {
    Rng rng(101);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t h = pick(rng, 1, 6), w = pick(rng, 1, 6), heads = pick(rng, 1, 3), c = 4 * heads;
        DfaStageConfig cfg;
        cfg.sampling_factor = 1;
        cfg.completion_range = pick(rng, 1, 4);
        cfg.max_offset = 2.0;
        cfg.heads = heads;
        FusionStage stage(2 + trial % 3, c, 8, 8, 2, cfg, rng);
        const TextEmbedding text = random_text(2, pick(rng, 1, 5), 8, rng);
        const FeatureMap m = grid_map(2, h, w, normal({h * w, c}, rng));
        const FeatureMap v = grid_map(2, h, w, normal({h * w, c}, rng));
        DfaFlags flags;
        flags.offsets = false;
        flags.scalar = false;
        Binder bind;
        const auto spatial = ad::constant(text.spatial_part());
        const AttentionResult a = stage.dfa(bind, m, v, spatial, text, flags);
        const Tensor want = oracle::cross_attention_oracle(stage.cross, m.data->value, text.spatial_part());
        worst = std::max(worst, max_abs_diff(a.output.data->value, want));
        const AttentionResult b = stage.plain(bind, m, spatial);
        worst = std::max(worst, max_abs_diff(a.output.data->value, b.output.data->value));
    }
    return {worst <= kDegeneracyTol, fmt("max |dfa - cross-attention| = %.3g over 50 instances", worst)};
}

// 2. Bilinear sampling and attention completion against brute-force oracles.
Outcome oracles() {
    Rng rng(102);
    double bilinear = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const std::size_t h = pick(rng, 1, 12), w = pick(rng, 1, 12);
        const Tensor g = normal({h * w, 3}, rng);
        const double r = rng.uniform(-1.5, static_cast<double>(h) + 0.5);
        const double c = rng.uniform(-1.5, static_cast<double>(w) + 0.5);
        const auto got = bilinear_sample(g, h, w, r, c);
        const auto want = oracle::bilinear_oracle(g, h, w, r, c);
        for (std::size_t k = 0; k < 3; ++k) bilinear = std::max(bilinear, std::abs(got[k] - want[k]));
    }
    double completion = 0.0;
    std::size_t grids = 0;
    for (std::size_t gamma : {1u, 2u, 4u})
        for (int trial = 0; trial < 40; ++trial) {
            const std::size_t h = gamma * pick(rng, 1, 16 / gamma), w = gamma * pick(rng, 1, 16 / gamma);
            const ReferenceGrid g = make_reference_grid(h, w, gamma);
            Tensor pos = g.points;
            const double s = rng.uniform(0.0, 2.0 * static_cast<double>(gamma));
            for (auto& v : pos.storage()) v += rng.uniform(-s, s);
            CompletionLayout lay;
            lay.height = h;
            lay.width = w;
            lay.anchors = g.anchors;
            lay.range = static_cast<double>(gamma * pick(rng, 1, 2));
            lay.use_cardinality = trial % 3 != 0;
            const Tensor scores = normal({g.count(), pick(rng, 1, 4)}, rng);
            std::size_t fallback = 0;
            const Tensor want = oracle::completion_oracle(scores, pos, lay, &fallback);
            completion = std::max(completion, max_abs_diff(complete_attention(scores, pos, lay), want));
            ++grids;
        }
    return {bilinear <= kOracleTol && completion <= kOracleTol,
            fmt("bilinear max err %.3g on 1000 points; completion max err %.3g on %zu grids up to 16x16", bilinear,
                completion, grids)};
}

// 3. Guidance-energy and fusion-parameter gradients against central differences.
Outcome gradients() {
    Rng rng(103);
    DenoiserConfig dc;
    ToyDenoiser den(dc, rng);
    const Tensor text = embed_text_stub("red circle [left of blue square]").appearance_part();
    Tensor mask({64});
    for (std::size_t i = 0; i < 64; ++i) mask[i] = (i / 8 >= 2 && i / 8 < 6 && i % 8 < 4) ? 1.0 : 0.0;
    double energy_err = 0.0;
    for (std::size_t t : {3u, 25u, 48u}) {
        LatentState z{8, 8, t, normal({64, dc.latent_channels}, rng)};
        const Tensor analytic = energy_gradient(den, z, text, mask);
        std::vector<double> a, n;
        Binder frozen(false);
        for (std::size_t i = 0; i < z.z.size(); ++i) {
            const double keep = z.z[i];
            z.z[i] = keep + 1e-5;
            const double up = energy(den.forward(frozen, ad::constant(z.z), 8, 8, t, text).appearance->value, mask);
            z.z[i] = keep - 1e-5;
            const double down = energy(den.forward(frozen, ad::constant(z.z), 8, 8, t, text).appearance->value, mask);
            z.z[i] = keep;
            a.push_back(analytic[i]);
            n.push_back((up - down) / 2e-5);
        }
        energy_err = std::max(energy_err, relative_error(a, n));
    }

    // At 32 px the stage-4 guidance map is 1x1 and peak normalisation pins it to 1,
    // so its gradient is exactly zero; 64 px gives a 2x2 map with live gradients.
    const TextEmbedding caption = embed_text_stub("red circle [left of blue square]");
    const GroundTruth truth{BBox{0.1, 0.2, 0.3, 0.4}, std::nullopt};
    auto fusion_check = [&](std::size_t side, double* grad_norm) {
        RunConfig rc;
        Model model(rc);
        Image image(side, side, 0.5);
        for (auto& v : image.pixels.storage()) v = rng.uniform(0.0, 1.0);
        Binder frozen(false);
        const auto features = model.autoencoder.backbone.forward(frozen, image);
        auto loss_at = [&] {
            Binder b(false);
            return fusion_loss(model.fusion.forward(b, features, caption), truth, FusionLoss::Bce)->value.item();
        };
        auto params = model.fusion_parameters();
        {
            Binder bind(true);
            ad::backward(fusion_loss(model.fusion.forward(bind, features, caption), truth, FusionLoss::Bce));
            bind.flush_gradients();
        }
        std::vector<double> a, n;
        for (auto& [name, p] : params) {
            for (int k = 0; k < 3; ++k) {
                const std::size_t i = rng.below(p->value.size());
                double& w = p->value[i];
                const double keep = w;
                w = keep + 1e-5;
                const double up = loss_at();
                w = keep - 1e-5;
                const double down = loss_at();
                w = keep;
                a.push_back(p->grad[i]);
                n.push_back((up - down) / 2e-5);
            }
        }
        *grad_norm = 0.0;
        for (double g : a) *grad_norm += g * g;
        *grad_norm = std::sqrt(*grad_norm);
        return relative_error(a, n);
    };
    double norm32 = 0.0, norm64 = 0.0;
    const double err32 = fusion_check(32, &norm32);
    const double err64 = fusion_check(64, &norm64);
    return {energy_err < kGradientTol && err32 < kGradientTol && err64 < kGradientTol && norm64 > 0.0,
            fmt("energy grad rel err %.3g on 8x8 latents; fusion grad rel err %.3g at 32 px (|g| = %.3g), "
                "%.3g at 64 px (|g| = %.3g)",
                energy_err, err32, norm32, err64, norm64)};
}

// 4. Energy range, scale invariance and the two extremes.
Outcome energy_properties() {
    Rng rng(104);
    bool range = true, extremes = true;
    double scale_err = 0.0;
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t n = pick(rng, 1, 64), k = pick(rng, 1, 6);
        const Tensor s = softmax_rows(normal({n, k}, rng, 3.0));
        Tensor mask({n});
        for (auto& v : mask.storage()) v = rng.below(2) ? 1.0 : 0.0;
        const double e = energy(s, mask);
        range = range && e >= 0.0 && e <= 1.0;
        for (double c : {0.1, 1.0, 10.0}) scale_err = std::max(scale_err, std::abs(energy(scaled(s, c), mask) - e));
        extremes = extremes && energy(s, Tensor({n}, 1.0)) == 0.0;
        if (n > 1) {
            Tensor outside({n, k}, 0.0), half({n});
            for (std::size_t i = 0; i < n; ++i) {
                half[i] = i % 2 ? 1.0 : 0.0;
                if (i % 2 == 0)
                    for (std::size_t j = 0; j < k; ++j) outside.at(i, j) = s.at(i, j);
            }
            extremes = extremes && energy(outside, half) == 1.0;
        }
    }
    return {range && extremes && scale_err <= kEnergyScaleTol,
            fmt("10000 pairs: range %s, full/disjoint %s, max |E(cS) - E(S)| = %.3g for c in {0.1, 1, 10}",
                range ? "ok" : "violated", extremes ? "exact" : "wrong", scale_err)};
}

// 5. Paired guided vs unguided sampling with a fixed seeded denoiser.
Outcome guidance_efficacy() {
    Rng rng(105);
    DenoiserConfig dc;
    ToyDenoiser den(dc, rng);
    const NoiseSchedule sched = build_noise_schedule(dc.steps);
    const Tensor text = embed_text_stub("red circle [left of blue square]").appearance_part();
    constexpr std::size_t side = 16;
    Tensor mask({side * side});
    for (std::size_t r = 4; r < 10; ++r)
        for (std::size_t c = 2; c < 8; ++c) mask[r * side + c] = 1.0;
    GuidanceConfig on;  // eta 35, 10 guided steps, 3 repeats
    GuidanceConfig off = on;
    off.enabled = false;
    int in_mask_wins = 0, energy_wins = 0, descents = 0;
    double gain = 0.0;
    for (int seed = 0; seed < kGuidanceRuns; ++seed) {
        Rng zr(mix_seed(7, static_cast<std::uint64_t>(seed)));
        const LatentState zT{side, side, dc.steps, random_normal({side * side, dc.latent_channels}, 1.0, zr)};
        const SampleResult g = sample_with_guidance(den, zT, mask, text, sched, on, static_cast<std::uint64_t>(seed));
        const SampleResult u = sample_with_guidance(den, zT, mask, text, sched, off, static_cast<std::uint64_t>(seed));
        in_mask_wins += g.final_in_mask > u.final_in_mask;
        energy_wins += g.final_energy < u.final_energy;
        descents += g.trace[g.guided_steps - 1].energy_after <= g.trace.front().energy_before;
        gain += (g.final_in_mask - u.final_in_mask) / kGuidanceRuns;
    }
    return {in_mask_wins >= kGuidanceWins && energy_wins >= kGuidanceWins && descents >= kGuidanceWins,
            fmt("guided beats unguided: in-mask %d/100, energy %d/100 (mean in-mask gain %+.4f); "
                "E falls across the guided steps in %d/100",
                in_mask_wins, energy_wins, gain, descents)};
}

// 6. Fusion training on synthetic scenes.
struct TrainingSetup {
    std::size_t image_size = 128;
    std::size_t train_scenes = 200;
    std::size_t held_out = 50;
    std::size_t objects = 3;
    std::size_t epochs = 20;
};

double mean_loss(Model& model, const std::vector<Sample>& samples) {
    double total = 0.0;
    for (const auto& s : samples) {
        Binder b(false);
        total += fusion_loss(model.fusion.forward(b, s.features, s.text), s.truth, FusionLoss::Bce)->value.item();
    }
    return total / static_cast<double>(samples.size());
}

double mean_iou(Model& model, const std::vector<Sample>& samples) {
    std::vector<GroundTruth> truths;
    std::vector<BBox> boxes;
    for (const auto& s : samples) {
        truths.push_back(s.truth);
        boxes.push_back(predict_box(model, s));
    }
    return evaluate_batch(truths, boxes).mean_iou;
}

Outcome training(const fs::path& work, const TrainingSetup& setup) {
    RunConfig base;
    base.image_size = setup.image_size;
    base.objects = setup.objects;
    base.epochs = setup.epochs;
    base.loss = FusionLoss::Bce;

    RunConfig gen = base;
    gen.scenes = setup.train_scenes;
    gen.out_dir = (work / "train").string();
    cmd_gen_data(gen);
    gen.seed = mix_seed(base.seed, 0x4e1d);
    gen.scenes = setup.held_out;
    gen.out_dir = (work / "held_out").string();
    cmd_gen_data(gen);

    auto run = [&](const std::string& stages, double* loss_before, double* loss_after, double* baseline) {
        RunConfig cfg = base;
        set_config_value(cfg, "dfa.stages", stages);
        Model model(cfg);
        auto train = load_dataset(work / "train");
        auto held = load_dataset(work / "held_out");
        encode_samples(model, train);
        encode_samples(model, held);
        if (baseline) *baseline = mean_iou(model, held);
        if (loss_before) *loss_before = mean_loss(model, train);
        train_fusion(model, train, {});
        if (loss_after) *loss_after = mean_loss(model, train);
        return mean_iou(model, held);
    };
    double before = 0.0, after = 0.0, baseline = 0.0;
    const double full = run("2,3,4", &before, &after, &baseline);
    const double cross = run("none", nullptr, nullptr, nullptr);
    const double drop = 1.0 - after / before;
    const bool pass = drop >= kLossDrop && full >= baseline + kIouMargin && full >= cross;
    return {pass, fmt("BCE %.4f -> %.4f (drop %.1f%%); held-out IoU full DFA %.4f, random-weights %.4f, "
                      "cross-only %.4f",
                      before, after, 100.0 * drop, full, baseline, cross)};
}

// 7. Structural pins.
Outcome structure() {
    std::vector<std::string> bad;
    Rng rng(107);
    AutoencoderConfig ac;
    ac.backbone = BackboneConfig::reference();
    Backbone backbone(ac.backbone, rng);
    Binder frozen(false);
    const auto f = backbone.forward(frozen, Image(224, 224, 0.5));
    const std::size_t grids[4] = {56, 28, 14, 7};
    for (std::size_t s = 0; s < 4; ++s)
        if (f[s].height != grids[s] || f[s].width != grids[s]) bad.push_back(fmt("stage %zu grid %zu", s + 1, f[s].height));
    const double bounds[3] = {8.0, 4.0, 2.0};
    for (std::size_t s = 2; s <= 4; ++s)
        if (default_dfa_stage(s, 2).max_offset != bounds[s - 2]) bad.push_back(fmt("offset bound at stage %zu", s));
    try {
        PatchExpand(255, 16, rng);
        bad.push_back("patch expand accepted C_i < 16 C_t");
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::Constraint) bad.push_back("patch expand raised the wrong error");
    }
    PatchExpand(256, 16, rng);
    const std::size_t stages[3] = {2, 3, 4};
    const std::size_t factors[3] = {2, 4, 8};
    for (int i = 0; i < 3; ++i)
        if (stage_for_factor(factors[i]) != stages[i]) bad.push_back(fmt("factor %zu", factors[i]));
    std::string detail = "grids 56/28/14/7 at 224, offset bounds 8/4/2, C_i >= 16 C_t enforced, f 2/4/8 -> stages 2/3/4";
    if (!bad.empty()) {
        detail = "mismatch:";
        for (const auto& b : bad) detail += " " + b + ";";
    }
    return {bad.empty(), detail};
}

// 8. Two consecutive CLI invocations per verb give identical bytes.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = read_file(e.path());
    return files;
}

Outcome determinism(const std::string& cli, const fs::path& work) {
    if (cli.empty()) return {false, "no --cli path given"};
    const fs::path root = work / "cli";
    const std::string common = " --seed 11 --set data.image_size=64 --set data.scenes=6 --set train.epochs=2"
                               " --set train.denoiser_steps=5 --set diffusion.steps=12";
    const fs::path data = root / "data", out = root / "out";
    const std::string image = (data / "scene_00000.ppm").string();
    const std::vector<std::pair<std::string, std::string>> verbs = {
        {"gen-data", "gen-data --out " + data.string()},
        {"train", "train --dataset " + data.string() + " --out " + out.string()},
        {"run", "run --image " + image + " --caption 'red circle [left of blue square]' --out " + out.string()},
        {"eval", "eval --dataset " + data.string() + " --out " + out.string()},
    };
    std::vector<std::string> differing;
    std::map<std::string, std::string> previous;
    fs::remove_all(root);
    for (const auto& [verb, args] : verbs) {
        std::map<std::string, std::string> runs[2];
        for (int k = 0; k < 2; ++k) {
            // Restore the state left by the previous verb so both runs start alike.
            fs::remove_all(root);
            fs::create_directories(root);
            for (const auto& [name, bytes] : previous) {
                fs::create_directories((root / name).parent_path());
                write_file_atomic(root / name, bytes);
            }
            const fs::path log = work / ("cli_" + verb + ".log");
            const std::string cmd = "'" + cli + "'" + common + " " + args + " > '" + log.string() + "' 2>&1";
            if (std::system(cmd.c_str()) != 0) return {false, verb + " failed: " + read_file(log)};
            runs[k] = snapshot(root);
            runs[k]["<stdout>"] = read_file(log);
        }
        if (runs[0] != runs[1]) differing.push_back(verb);
        runs[0].erase("<stdout>");
        previous = runs[0];
    }
    if (!differing.empty()) {
        std::string d = "outputs differ for:";
        for (const auto& v : differing) d += " " + v;
        return {false, d};
    }
    return {true, fmt("gen-data, train, run, eval: %zu output files and stdout identical across two runs",
                      previous.size())};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string cli;
    std::set<int> only, known;
    std::string work_dir = (fs::temp_directory_path() / "stldm_acceptance").string();
    TrainingSetup setup;
    app.add_option("--cli", cli, "path to the stldm command-line tool");
    app.add_option("--only", only, "run only these criteria");
    app.add_option("--known-failure", known, "criteria recorded as unattainable; they still print FAIL");
    app.add_option("--work", work_dir, "scratch directory");
    app.add_option("--train-scenes", setup.train_scenes, "training scenes for criterion 6");
    app.add_option("--objects", setup.objects, "objects per scene for criterion 6");
    app.add_option("--epochs", setup.epochs, "epochs for criterion 6");
    CLI11_PARSE(app, argc, argv);

    const fs::path work = work_dir;
    fs::remove_all(work);
    fs::create_directories(work);

    struct Criterion {
        int id;
        const char* name;
        double budget;  // seconds, 0 for none
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria = {
        {1, "degeneracy", kBudgetDegeneracy, degeneracy},
        {2, "oracles", 0.0, oracles},
        {3, "gradients", kBudgetGradients, gradients},
        {4, "energy", 0.0, energy_properties},
        {5, "guidance", kBudgetGuidance, guidance_efficacy},
        {6, "training", kBudgetTraining, [&] { return training(work, setup); }},
        {7, "structure", 0.0, structure},
        {8, "determinism", 0.0, [&] { return determinism(cli, work); }},
    };

    int unexpected = 0, passed = 0, ran = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && !only.count(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (c.budget > 0.0 && secs > c.budget) {
            o.pass = false;
            o.detail += fmt(" [over the %.0f s budget]", c.budget);
        }
        ++ran;
        passed += o.pass;
        if (!o.pass && !known.count(c.id)) ++unexpected;
        std::printf("%s %d %-11s %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
        std::fflush(stdout);
    }
    std::printf("%d/%d criteria passed\n", passed, ran);
    fs::remove_all(work);
    return unexpected == 0 ? 0 : 1;
}
