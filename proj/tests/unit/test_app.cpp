#include <cstring>
#include <filesystem>
#include <sstream>

#include "app/checkpoint.hpp"
#include "app/config.hpp"
#include "app/model.hpp"
#include "app/pipeline.hpp"
#include "common/error.hpp"
#include "data/image_io.hpp"
#include "doctest.h"
#include "stldm/stldm.h"
#include "support.hpp"

using namespace stldm;
namespace fs = std::filesystem;

namespace {

// Small enough that a full gen-data / train / run / eval pass takes seconds.
RunConfig tiny_config(const fs::path& root) {
    RunConfig cfg;
    set_config_value(cfg, "data.image_size", "64");
    set_config_value(cfg, "data.scenes", "4");
    set_config_value(cfg, "data.objects", "2");
    set_config_value(cfg, "train.epochs", "2");
    set_config_value(cfg, "train.denoiser_steps", "3");
    set_config_value(cfg, "diffusion.steps", "6");
    set_config_value(cfg, "guidance.guided_steps", "2");
    set_config_value(cfg, "denoiser.width", "8");
    set_config_value(cfg, "denoiser.mid_width", "16");
    cfg.data_dir = (root / "data").string();
    cfg.out_dir = (root / "out").string();
    return cfg;
}

// gen-data writes into paths.out; point it at the dataset directory.
std::size_t gen_data(const RunConfig& cfg) {
    RunConfig g = cfg;
    g.out_dir = cfg.data_dir;
    return cmd_gen_data(g);
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) { return read_file(p); }

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an stldm::Error");
    return ErrorKind::Config;
}

}  // namespace

TEST_CASE("checkpoint encoding round-trips bit-exactly") {
    Rng rng(61);
    TensorEntries entries;
    entries.emplace_back("a", testing::normal({3, 4}, rng));
    entries.emplace_back("nested/name.weight", Tensor::vector({-0.0, 1e-310, 1e308, 0.1}));
    entries.emplace_back("meta/config", text_tensor("seed = 5\n"));
    const std::string bytes = encode_checkpoint(entries);
    CHECK(bytes.rfind("STLDM1", 0) == 0);
    const TensorEntries back = decode_checkpoint(bytes, "mem");
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back[i].first == entries[i].first);
        REQUIRE(back[i].second.shape() == entries[i].second.shape());
        CHECK(std::memcmp(back[i].second.data(), entries[i].second.data(), 8 * entries[i].second.size()) == 0);
    }
    CHECK(tensor_text(back[2].second) == "seed = 5\n");
    CHECK(encode_checkpoint(back) == bytes);

    CHECK(kind_of([&] { decode_checkpoint("STLDM2" + bytes.substr(6), "m"); }) == ErrorKind::Data);
    CHECK(kind_of([&] { decode_checkpoint(bytes.substr(0, bytes.size() - 3), "m"); }) == ErrorKind::Data);
    CHECK(kind_of([&] { decode_checkpoint(bytes + "x", "m"); }) == ErrorKind::Data);
    // Every truncation point is rejected, never crashes.
    for (std::size_t n = 0; n < bytes.size(); n += 7) CHECK(kind_of([&] { decode_checkpoint(bytes.substr(0, n), "m"); }) == ErrorKind::Data);
}

TEST_CASE("config keys") {
    RunConfig cfg;
    for (const auto& key : config_keys()) {
        CAPTURE(key);
        const std::string v = get_config_value(cfg, key);
        set_config_value(cfg, key, v);
        CHECK(get_config_value(cfg, key) == v);
    }
    RunConfig other;
    apply_config_text(other, format_config(cfg), "fmt");
    CHECK(format_config(other) == format_config(cfg));

    apply_config_text(cfg, "# comment\n\nguidance.eta = 12.5\n  seed=9  \n", "t");
    CHECK(cfg.guidance.eta == 12.5);
    CHECK(cfg.seed == 9);
    CHECK(kind_of([&] { set_config_value(cfg, "guidance.etaa", "1"); }) == ErrorKind::Config);
    CHECK(kind_of([&] { set_config_value(cfg, "guidance.eta", "abc"); }) == ErrorKind::Config);
    CHECK(kind_of([&] { set_config_value(cfg, "seed", "-1"); }) == ErrorKind::Config);
    CHECK(kind_of([&] { set_config_value(cfg, "train.resume", "maybe"); }) == ErrorKind::Config);
    CHECK(kind_of([&] { apply_config_text(cfg, "no equals sign\n", "t"); }) == ErrorKind::Config);
    try {
        apply_config_text(cfg, "seed = 1\nbogus.key = 2\n", "conf.txt");
        FAIL("no error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("conf.txt:2") != std::string::npos);
    }

    RunConfig bad;
    set_config_value(bad, "model.factor", "16");
    CHECK(kind_of([&] { bad.validate(); }) == ErrorKind::Config);
    bad = RunConfig{};
    bad.guidance.eta = -1.0;
    CHECK(kind_of([&] { bad.validate(); }) == ErrorKind::Config);
    CHECK(is_model_key("dfa.offsets"));
    CHECK(is_model_key("model.factor"));
    CHECK(!is_model_key("guidance.eta"));
    CHECK(!is_model_key("paths.out"));
}

TEST_CASE("pipeline: gen-data, train, resume, run, eval, dump") {
    TempDir tmp("stldm_app_test");
    RunConfig cfg = tiny_config(tmp.path);

    SUBCASE("gen-data writes scenes and is byte-reproducible") {
        CHECK(gen_data(cfg) == 4);
        const std::string manifest = slurp(fs::path(cfg.data_dir) / kManifestName);
        CHECK(std::count(manifest.begin(), manifest.end(), '\n') == 4);
        const std::string first = slurp(fs::path(cfg.data_dir) / "scene_00002.ppm");
        fs::remove_all(cfg.data_dir);
        gen_data(cfg);
        CHECK(slurp(fs::path(cfg.data_dir) / kManifestName) == manifest);
        CHECK(slurp(fs::path(cfg.data_dir) / "scene_00002.ppm") == first);
        RunConfig none = cfg;
        none.scenes = 0;
        none.data_dir = (tmp.path / "empty").string();
        CHECK(gen_data(none) == 0);
        CHECK(slurp(fs::path(none.data_dir) / kManifestName).empty());
        none.data_dir = (tmp.path / "missing").string();
        CHECK(kind_of([&] { cmd_train(none, {}); }) == ErrorKind::Data);
    }

    SUBCASE("resume reproduces the uninterrupted run bitwise") {
        gen_data(cfg);
        RunConfig straight = cfg;
        straight.checkpoint = (tmp.path / "straight.ckpt").string();
        const auto full = cmd_train(straight, {});
        REQUIRE(full.size() == 2);

        RunConfig split = cfg;
        split.checkpoint = (tmp.path / "split.ckpt").string();
        split.epochs = 1;
        CHECK(cmd_train(split, {}).size() == 1);
        split.epochs = 2;
        split.resume = true;
        std::vector<std::pair<std::size_t, double>> seen;
        const auto rest = cmd_train(split, [&](std::size_t e, double l) { seen.emplace_back(e, l); });
        REQUIRE(rest.size() == 1);
        CHECK(seen.at(0).first == 2);
        CHECK(rest[0] == full[1]);
        // Weights and optimiser state match; only the recorded run config differs.
        const auto a = decode_checkpoint(slurp(split.checkpoint), "split");
        const auto b = decode_checkpoint(slurp(straight.checkpoint), "straight");
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].first == b[i].first);
            if (a[i].first != "meta/config") CHECK(a[i].second == b[i].second);
        }
    }

    SUBCASE("structural flags travel with the checkpoint") {
        gen_data(cfg);
        RunConfig trained = cfg;
        set_config_value(trained, "dfa.offsets", "false");
        set_config_value(trained, "train.epochs", "1");
        cmd_train(trained, {});
        const auto model = load_model(cfg, cfg.checkpoint_path());
        CHECK(!model->config.dfa.offsets);
        CHECK(model->epochs_done == 1);
    }

    SUBCASE("run, eval and dump-attn outputs") {
        gen_data(cfg);
        set_config_value(cfg, "train.epochs", "1");
        cmd_train(cfg, {});
        cfg.image = (fs::path(cfg.data_dir) / "scene_00000.ppm").string();
        cfg.caption = parse_manifest(slurp(fs::path(cfg.data_dir) / kManifestName), "m")[0].caption;

        const RunSummary s = cmd_run(cfg);
        CHECK(s.image_height == 64);
        CHECK(s.image_width == 64);
        CHECK(s.guide_height == 2);
        CHECK(s.guided_steps == 2);
        const GrayImage g = decode_pgm(slurp(fs::path(cfg.out_dir) / "guidance.pgm"));
        CHECK(g.height == 2);
        const std::string trace = slurp(fs::path(cfg.out_dir) / "trace.tsv");
        CHECK(std::count(trace.begin(), trace.end(), '\n') == 6);
        const std::string image = slurp(fs::path(cfg.out_dir) / "output.ppm");
        CHECK(cmd_run(cfg).final_energy == s.final_energy);
        CHECK(slurp(fs::path(cfg.out_dir) / "output.ppm") == image);

        RunConfig off = cfg;
        off.guidance.enabled = false;
        CHECK(cmd_run(off).guided_steps == 0);

        const EvalReport r = cmd_eval(cfg);
        CHECK(r.rows.size() == 4);
        const std::string report = slurp(fs::path(cfg.out_dir) / "eval.tsv");
        CHECK(std::count(report.begin(), report.end(), '\n') == 5);
        CHECK(report.find("\nmean\t") != std::string::npos);

        cfg.dump_stage = 4;
        const std::size_t files = cmd_dump_attention(cfg);
        const std::size_t heads = cfg.fusion_config().heads[3];
        CHECK(files == heads + 1);
        const fs::path dir = fs::path(cfg.out_dir) / "attention";
        const GrayImage mean = decode_pgm(slurp(dir / "stage4_mean.pgm"));
        CHECK(mean.height == 2);
        std::vector<double> avg(mean.pixels.size(), 0.0);
        for (std::size_t j = 0; j < heads; ++j) {
            const GrayImage head = decode_pgm(slurp(dir / ("stage4_head" + std::to_string(j) + ".pgm")));
            REQUIRE(head.pixels.size() == avg.size());
            for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += head.pixels[i] / static_cast<double>(heads);
        }
        // Each stored pixel is off by at most half a level, so the mean of heads is too.
        for (std::size_t i = 0; i < avg.size(); ++i) CHECK(std::abs(avg[i] - mean.pixels[i]) <= 1.0);
        cfg.dump_stage = 5;
        CHECK(kind_of([&] { cmd_dump_attention(cfg); }) == ErrorKind::Config);

        cfg.dump_stage = 4;
        cfg.caption = "red dragon [left of blue square]";
        CHECK(kind_of([&] { cmd_run(cfg); }) == ErrorKind::Vocabulary);
    }
}

TEST_CASE("eval fixture: boxes read off a painted guidance map score near one") {
    std::vector<GroundTruth> truths;
    std::vector<BBox> predictions;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const Scene s = generate_scene(seed, 32, 3);
        GuidanceMap g;
        g.height = g.width = 256;
        g.values = rasterize_box(s.gt_box, 256, 256).reshaped({256, 256});
        truths.push_back(s.truth());
        predictions.push_back(predicted_box_from_guidance(g));
    }
    CHECK(evaluate_batch(truths, predictions).mean_iou > 0.95);
}

TEST_CASE("C API") {
    stldm_config* cfg = nullptr;
    REQUIRE(stldm_config_create(&cfg) == STLDM_OK);
    CHECK(stldm_config_set(cfg, "guidance.eta", "20") == STLDM_OK);
    char buf[8];
    size_t needed = 0;
    CHECK(stldm_config_get(cfg, "guidance.eta", buf, sizeof buf, &needed) == STLDM_OK);
    CHECK(std::string(buf) == "20");
    CHECK(needed == 3);
    CHECK(stldm_config_get(cfg, "guidance.eta", nullptr, 0, &needed) == STLDM_OK);
    CHECK(needed == 3);

    CHECK(stldm_config_set(cfg, "no.such.key", "1") == STLDM_ERR_CONFIG);
    CHECK(std::string(stldm_last_error()).find("no.such.key") != std::string::npos);
    CHECK(stldm_config_set(nullptr, "seed", "1") == STLDM_ERR_CONFIG);
    CHECK(stldm_config_load(cfg, "/nonexistent/file.conf") == STLDM_ERR_CONFIG);
    CHECK(stldm_train(cfg, nullptr, nullptr) != STLDM_OK);
    CHECK(stldm_config_set(cfg, "run.caption", "red circle [left of blue square]") == STLDM_OK);

    CHECK(std::string(stldm_status_name(STLDM_ERR_GUIDANCE_EMPTY)) != "");
    CHECK(stldm_exit_code(STLDM_OK) == 0);
    CHECK(stldm_exit_code(STLDM_ERR_CONFIG) == 1);
    CHECK(stldm_exit_code(STLDM_ERR_UNSUPPORTED) == 1);
    CHECK(stldm_exit_code(STLDM_ERR_DATA) == 2);
    CHECK(stldm_exit_code(STLDM_ERR_IO) == 2);
    CHECK(stldm_exit_code(STLDM_ERR_NUMERIC) == 3);

    TempDir tmp("stldm_capi_test");
    stldm_config_set(cfg, "paths.out", (tmp.path / "d").c_str());
    stldm_config_set(cfg, "data.scenes", "3");
    stldm_config_set(cfg, "data.image_size", "64");
    size_t written = 0;
    CHECK(stldm_gen_data(cfg, &written) == STLDM_OK);
    CHECK(written == 3);
    stldm_config_destroy(cfg);
    stldm_config_destroy(nullptr);
}

TEST_CASE("reconstruction training brings held-out pixel MSE below 0.01") {
    TempDir dir("stldm_recon");
    RunConfig cfg = tiny_config(dir.path);
    cfg.scenes = 40;
    gen_data(cfg);
    RunConfig held = cfg;
    held.seed = mix_seed(cfg.seed, 0x4e1d);
    held.scenes = 10;
    held.data_dir = (dir.path / "held").string();
    gen_data(held);

    Model model(cfg);
    auto train = load_dataset(cfg.data_dir);
    auto test = load_dataset(held.data_dir);
    encode_samples(model, train);
    encode_samples(model, test);
    auto held_mse = [&] {
        double total = 0.0;
        for (const auto& s : test) {
            Binder frozen(false);
            auto pixels = model.autoencoder.decoder.forward(frozen, model.autoencoder.latent_from_features(frozen, s.features));
            total += ad::mse_mean(pixels, s.image.pixels.reshaped({s.image.pixels.size()}))->value.item();
        }
        return total / static_cast<double>(test.size());
    };
    const double before = held_mse();
    const auto losses = train_reconstruction(model, train, 6);
    const double after = held_mse();
    CAPTURE(before);
    CAPTURE(after);
    CHECK(losses.back() < losses.front());
    CHECK(after < 0.01);
    CHECK(after < before);
}

TEST_CASE("random-weights model scores a mean IoU below 0.2") {
    TempDir dir("stldm_baseline");
    RunConfig cfg = tiny_config(dir.path);
    set_config_value(cfg, "data.image_size", "128");
    cfg.scenes = 30;
    gen_data(cfg);
    Model model(cfg);
    auto samples = load_dataset(cfg.data_dir);
    encode_samples(model, samples);
    std::vector<GroundTruth> truths;
    std::vector<BBox> boxes;
    for (const auto& s : samples) {
        truths.push_back(s.truth);
        boxes.push_back(predict_box(model, s));
    }
    const double mean = evaluate_batch(truths, boxes).mean_iou;
    CAPTURE(mean);
    CHECK(mean < 0.2);
}
