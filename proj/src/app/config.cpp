#include "app/config.hpp"

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

#include "common/error.hpp"
#include "data/image_io.hpp"

namespace stldm {

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
    fail(ErrorKind::Config, "invalid value '" + value + "' for " + key + " (expected " + expected + ")");
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad_value(key, v, "a non-negative integer");
    return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
    return static_cast<std::size_t>(parse_u64(key, v));
}

double parse_real(const std::string& key, const std::string& v) {
    if (v.empty()) bad_value(key, v, "a real number");
    errno = 0;
    char* end = nullptr;
    const double out = std::strtod(v.c_str(), &end);
    if (errno != 0 || end != v.c_str() + v.size() || !std::isfinite(out)) bad_value(key, v, "a finite real number");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    bad_value(key, v, "true or false");
}

std::vector<std::string> split(const std::string& v, char sep) {
    std::vector<std::string> parts;
    std::string part;
    std::istringstream in(v);
    while (std::getline(in, part, sep)) parts.push_back(trim(part));
    return parts;
}

std::array<std::size_t, 4> parse_quad(const std::string& key, const std::string& v) {
    auto parts = split(v, ',');
    if (parts.size() != 4) bad_value(key, v, "four comma-separated integers");
    std::array<std::size_t, 4> out{};
    for (std::size_t i = 0; i < 4; ++i) out[i] = parse_size(key, parts[i]);
    return out;
}

std::string format_quad(const std::array<std::size_t, 4>& q) {
    return std::to_string(q[0]) + "," + std::to_string(q[1]) + "," + std::to_string(q[2]) + "," + std::to_string(q[3]);
}

std::string format_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string format_bool(bool b) { return b ? "true" : "false"; }

std::array<bool, 4> parse_stages(const std::string& key, const std::string& v) {
    std::array<bool, 4> out{false, false, false, false};
    if (v == "none" || v.empty()) return out;
    for (const auto& part : split(v, ',')) {
        const std::size_t s = parse_size(key, part);
        if (s < 1 || s > 4) bad_value(key, v, "stage numbers in 1..4 or 'none'");
        out[s - 1] = true;
    }
    return out;
}

std::string format_stages(const std::array<bool, 4>& stages) {
    std::string out;
    for (std::size_t i = 0; i < 4; ++i) {
        if (!stages[i]) continue;
        if (!out.empty()) out += ",";
        out += std::to_string(i + 1);
    }
    return out.empty() ? "none" : out;
}

struct Entry {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

struct Table {
    std::vector<std::string> order;
    std::map<std::string, Entry> entries;

    void add(const std::string& key, Entry e) {
        order.push_back(key);
        entries.emplace(key, std::move(e));
    }
};

const Table& table() {
    static const Table t = [] {
        Table t;
        auto size_entry = [](std::size_t RunConfig::*field, const std::string& key) {
            return Entry{[field, key](RunConfig& c, const std::string& v) { c.*field = parse_size(key, v); },
                         [field](const RunConfig& c) { return std::to_string(c.*field); }};
        };
        auto real_entry = [](auto getter, const std::string& key) {
            return Entry{[getter, key](RunConfig& c, const std::string& v) { getter(c) = parse_real(key, v); },
                         [getter](const RunConfig& c) { return format_real(getter(const_cast<RunConfig&>(c))); }};
        };
        auto bool_entry = [](auto getter, const std::string& key) {
            return Entry{[getter, key](RunConfig& c, const std::string& v) { getter(c) = parse_bool(key, v); },
                         [getter](const RunConfig& c) { return format_bool(getter(const_cast<RunConfig&>(c))); }};
        };
        auto string_entry = [](std::string RunConfig::*field) {
            return Entry{[field](RunConfig& c, const std::string& v) { c.*field = v; },
                         [field](const RunConfig& c) { return c.*field; }};
        };
        auto quad_entry = [](auto getter, const std::string& key) {
            return Entry{[getter, key](RunConfig& c, const std::string& v) { getter(c) = parse_quad(key, v); },
                         [getter](const RunConfig& c) { return format_quad(getter(const_cast<RunConfig&>(c))); }};
        };

        t.add("seed", Entry{[](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); },
                            [](const RunConfig& c) { return std::to_string(c.seed); }});
        t.add("data.image_size", size_entry(&RunConfig::image_size, "data.image_size"));
        t.add("data.scenes", size_entry(&RunConfig::scenes, "data.scenes"));
        t.add("data.objects", size_entry(&RunConfig::objects, "data.objects"));
        t.add("data.dir", string_entry(&RunConfig::data_dir));

        t.add("model.channels", quad_entry([](RunConfig& c) -> auto& { return c.autoencoder.backbone.channels; },
                                           "model.channels"));
        t.add("model.depths", quad_entry([](RunConfig& c) -> auto& { return c.autoencoder.backbone.depths; },
                                         "model.depths"));
        t.add("model.heads", quad_entry([](RunConfig& c) -> auto& { return c.autoencoder.backbone.heads; },
                                        "model.heads"));
        t.add("model.window", Entry{[](RunConfig& c, const std::string& v) {
                                        c.autoencoder.backbone.window = parse_size("model.window", v);
                                    },
                                    [](const RunConfig& c) { return std::to_string(c.autoencoder.backbone.window); }});
        t.add("model.mlp_ratio",
              Entry{[](RunConfig& c, const std::string& v) {
                        c.autoencoder.backbone.mlp_ratio = parse_size("model.mlp_ratio", v);
                    },
                    [](const RunConfig& c) { return std::to_string(c.autoencoder.backbone.mlp_ratio); }});
        t.add("model.factor",
              Entry{[](RunConfig& c, const std::string& v) { c.autoencoder.factor = parse_size("model.factor", v); },
                    [](const RunConfig& c) { return std::to_string(c.autoencoder.factor); }});
        t.add("model.latent_channels",
              Entry{[](RunConfig& c, const std::string& v) {
                        c.autoencoder.latent_channels = parse_size("model.latent_channels", v);
                    },
                    [](const RunConfig& c) { return std::to_string(c.autoencoder.latent_channels); }});
        t.add("model.offset_dim", size_entry(&RunConfig::offset_dim, "model.offset_dim"));
        t.add("model.offset_heads", size_entry(&RunConfig::offset_heads, "model.offset_heads"));

        t.add("dfa.stages", Entry{[](RunConfig& c, const std::string& v) { c.dfa.enabled = parse_stages("dfa.stages", v); },
                                  [](const RunConfig& c) { return format_stages(c.dfa.enabled); }});
        t.add("dfa.offsets", bool_entry([](RunConfig& c) -> bool& { return c.dfa.offsets; }, "dfa.offsets"));
        t.add("dfa.scalar", bool_entry([](RunConfig& c) -> bool& { return c.dfa.scalar; }, "dfa.scalar"));
        t.add("dfa.card", bool_entry([](RunConfig& c) -> bool& { return c.dfa.cardinality; }, "dfa.card"));
        t.add("dfa.mode", Entry{[](RunConfig& c, const std::string& v) {
                                    if (v == "full") c.dfa.mode = AttentionMode::Full;
                                    else if (v == "t-only") c.dfa.mode = AttentionMode::TransformerOnly;
                                    else if (v == "c-only") c.dfa.mode = AttentionMode::CrossOnly;
                                    else bad_value("dfa.mode", v, "full, t-only or c-only");
                                },
                                [](const RunConfig& c) -> std::string {
                                    switch (c.dfa.mode) {
                                        case AttentionMode::TransformerOnly: return "t-only";
                                        case AttentionMode::CrossOnly: return "c-only";
                                        default: return "full";
                                    }
                                }});
        t.add("dfa.inputs", Entry{[](RunConfig& c, const std::string& v) {
                                      TransformerInputs in{false, false, false};
                                      for (char ch : v) {
                                          if (ch == 'm') in.multimodal = true;
                                          else if (ch == 'v') in.visual = true;
                                          else if (ch == 'l') in.text = true;
                                          else bad_value("dfa.inputs", v, "letters from m, v, l");
                                      }
                                      if (!in.multimodal && !in.visual) bad_value("dfa.inputs", v, "m or v present");
                                      c.dfa.inputs = in;
                                  },
                                  [](const RunConfig& c) {
                                      std::string s;
                                      if (c.dfa.inputs.multimodal) s += "m";
                                      if (c.dfa.inputs.visual) s += "v";
                                      if (c.dfa.inputs.text) s += "l";
                                      return s;
                                  }});
        t.add("dfa.keys", Entry{[](RunConfig& c, const std::string& v) {
                                    if (v == "mean") c.dfa.keys = KeyReduction::Mean;
                                    else if (v == "max") c.dfa.keys = KeyReduction::Max;
                                    else bad_value("dfa.keys", v, "mean or max");
                                },
                                [](const RunConfig& c) -> std::string {
                                    return c.dfa.keys == KeyReduction::Max ? "max" : "mean";
                                }});
        t.add("dfa.epsilon", real_entry([](RunConfig& c) -> double& { return c.dfa_epsilon; }, "dfa.epsilon"));

        t.add("train.epochs", size_entry(&RunConfig::epochs, "train.epochs"));
        t.add("train.lr", real_entry([](RunConfig& c) -> double& { return c.optimizer.lr; }, "train.lr"));
        t.add("train.beta1", real_entry([](RunConfig& c) -> double& { return c.optimizer.beta1; }, "train.beta1"));
        t.add("train.beta2", real_entry([](RunConfig& c) -> double& { return c.optimizer.beta2; }, "train.beta2"));
        t.add("train.weight_decay",
              real_entry([](RunConfig& c) -> double& { return c.optimizer.weight_decay; }, "train.weight_decay"));
        t.add("train.eps", real_entry([](RunConfig& c) -> double& { return c.optimizer.eps; }, "train.eps"));
        t.add("train.loss", Entry{[](RunConfig& c, const std::string& v) {
                                      if (v == "bce") c.loss = FusionLoss::Bce;
                                      else if (v == "soft-iou") c.loss = FusionLoss::SoftIou;
                                      else bad_value("train.loss", v, "bce or soft-iou");
                                  },
                                  [](const RunConfig& c) -> std::string {
                                      return c.loss == FusionLoss::SoftIou ? "soft-iou" : "bce";
                                  }});
        t.add("train.recon_epochs", size_entry(&RunConfig::recon_epochs, "train.recon_epochs"));
        t.add("train.kl_weight", real_entry([](RunConfig& c) -> double& { return c.kl_weight; }, "train.kl_weight"));
        t.add("train.denoiser_steps", size_entry(&RunConfig::denoiser_steps, "train.denoiser_steps"));
        t.add("train.resume", bool_entry([](RunConfig& c) -> bool& { return c.resume; }, "train.resume"));

        t.add("diffusion.steps", size_entry(&RunConfig::diffusion_steps, "diffusion.steps"));
        t.add("denoiser.width", size_entry(&RunConfig::denoiser_width, "denoiser.width"));
        t.add("denoiser.mid_width", size_entry(&RunConfig::denoiser_mid_width, "denoiser.mid_width"));
        t.add("denoiser.heads", size_entry(&RunConfig::denoiser_heads, "denoiser.heads"));

        t.add("guidance.eta", real_entry([](RunConfig& c) -> double& { return c.guidance.eta; }, "guidance.eta"));
        t.add("guidance.guided_steps",
              Entry{[](RunConfig& c, const std::string& v) {
                        c.guidance.guided_steps = parse_size("guidance.guided_steps", v);
                    },
                    [](const RunConfig& c) { return std::to_string(c.guidance.guided_steps); }});
        t.add("guidance.repeats",
              Entry{[](RunConfig& c, const std::string& v) { c.guidance.repeats = parse_size("guidance.repeats", v); },
                    [](const RunConfig& c) { return std::to_string(c.guidance.repeats); }});
        t.add("guidance.beta_frac",
              real_entry([](RunConfig& c) -> double& { return c.guidance.beta_frac; }, "guidance.beta_frac"));
        t.add("guidance.retry_beta_frac",
              real_entry([](RunConfig& c) -> double& { return c.guidance.retry_beta_frac; }, "guidance.retry_beta_frac"));
        t.add("guidance.dilation", Entry{[](RunConfig& c, const std::string& v) {
                                             if (v == "bbox") c.guidance.dilation = DilationMode::BoundingBox;
                                             else if (v == "morph") c.guidance.dilation = DilationMode::Morphological;
                                             else bad_value("guidance.dilation", v, "bbox or morph");
                                         },
                                         [](const RunConfig& c) -> std::string {
                                             return c.guidance.dilation == DilationMode::Morphological ? "morph" : "bbox";
                                         }});
        t.add("guidance.morph_kernel",
              Entry{[](RunConfig& c, const std::string& v) {
                        c.guidance.morph_kernel = parse_size("guidance.morph_kernel", v);
                    },
                    [](const RunConfig& c) { return std::to_string(c.guidance.morph_kernel); }});
        t.add("guidance.enabled",
              bool_entry([](RunConfig& c) -> bool& { return c.guidance.enabled; }, "guidance.enabled"));
        t.add("guidance.activation",
              bool_entry([](RunConfig& c) -> bool& { return c.guidance.activation; }, "guidance.activation"));
        t.add("guidance.dilate", bool_entry([](RunConfig& c) -> bool& { return c.guidance.dilate; }, "guidance.dilate"));

        t.add("paths.out", string_entry(&RunConfig::out_dir));
        t.add("paths.checkpoint", string_entry(&RunConfig::checkpoint));
        t.add("run.image", string_entry(&RunConfig::image));
        t.add("run.caption", string_entry(&RunConfig::caption));
        t.add("dump.stage", size_entry(&RunConfig::dump_stage, "dump.stage"));
        return t;
    }();
    return t;
}

}  // namespace

std::filesystem::path RunConfig::checkpoint_path() const {
    if (!checkpoint.empty()) return checkpoint;
    return std::filesystem::path(out_dir) / "model.ckpt";
}

FusionConfig RunConfig::fusion_config() const {
    FusionConfig f = FusionConfig::from_backbone(autoencoder.backbone);
    f.offset_dim = offset_dim;
    f.offset_heads = offset_heads;
    f.epsilon = dfa_epsilon;
    f.flags = dfa;
    return f;
}

DenoiserConfig RunConfig::denoiser_config() const {
    DenoiserConfig d;
    d.latent_channels = autoencoder.latent_channels;
    d.width = denoiser_width;
    d.mid_width = denoiser_mid_width;
    d.heads = denoiser_heads;
    d.steps = diffusion_steps;
    return d;
}

void RunConfig::validate() const {
    validate_autoencoder_config(autoencoder);
    fusion_config().validate();
    denoiser_config().validate();
    if (image_size == 0 || image_size % 32 != 0) {
        fail(ErrorKind::Config, "data.image_size must be a positive multiple of 32, got " + std::to_string(image_size));
    }
    if (objects == 0) fail(ErrorKind::Config, "data.objects must be >= 1");
    if (!(optimizer.lr > 0.0)) fail(ErrorKind::Config, "train.lr must be > 0");
    if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0) || !(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
        fail(ErrorKind::Config, "optimizer betas must lie in [0, 1)");
    }
    if (!(optimizer.eps > 0.0) || optimizer.weight_decay < 0.0) fail(ErrorKind::Config, "invalid optimizer eps/decay");
    if (kl_weight < 0.0) fail(ErrorKind::Config, "train.kl_weight must be >= 0");
    if (diffusion_steps < 2) fail(ErrorKind::Config, "diffusion.steps must be >= 2");
    guidance.validate(diffusion_steps);
    if (dump_stage < 1 || dump_stage > 4) {
        fail(ErrorKind::Config, "dump.stage must be in 1..4, got " + std::to_string(dump_stage));
    }
}

const std::vector<std::string>& config_keys() { return table().order; }

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto& entries = table().entries;
    auto it = entries.find(key);
    if (it == entries.end()) fail(ErrorKind::Config, "unknown config key '" + key + "'");
    it->second.set(cfg, trim(value));
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) {
    const auto& entries = table().entries;
    auto it = entries.find(key);
    if (it == entries.end()) fail(ErrorKind::Config, "unknown config key '" + key + "'");
    return it->second.get(cfg);
}

void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            fail(ErrorKind::Config, origin + ":" + std::to_string(number) + ": expected 'key = value'");
        }
        try {
            set_config_value(cfg, trim(line.substr(0, eq)), line.substr(eq + 1));
        } catch (const Error& e) {
            fail(e.kind(), origin + ":" + std::to_string(number) + ": " + e.what());
        }
    }
}

RunConfig load_config_file(const std::filesystem::path& path) {
    RunConfig cfg;
    std::string text;
    try {
        text = read_file(path);
    } catch (const Error& e) {
        fail(ErrorKind::Config, std::string("config: ") + e.what());
    }
    apply_config_text(cfg, text, path.string());
    return cfg;
}

std::string format_config(const RunConfig& cfg) {
    std::string out;
    for (const auto& key : config_keys()) out += key + " = " + get_config_value(cfg, key) + "\n";
    return out;
}

bool is_model_key(const std::string& key) {
    return key.rfind("model.", 0) == 0 || key.rfind("dfa.", 0) == 0 || key.rfind("denoiser.", 0) == 0 ||
           key == "diffusion.steps";
}

}  // namespace stldm
