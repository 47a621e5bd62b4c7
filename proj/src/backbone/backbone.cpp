#include "backbone/backbone.hpp"

#include <cmath>

#include "common/error.hpp"

namespace stldm {

Image::Image(std::size_t h, std::size_t w, double fill) : height(h), width(w), pixels({h, w, 3}, fill) {}

BackboneConfig BackboneConfig::reference() {
    BackboneConfig c;
    c.channels = {96, 192, 384, 768};
    c.depths = {2, 2, 6, 2};
    c.heads = {3, 6, 12, 24};
    c.window = 7;
    return c;
}

void BackboneConfig::validate() const {
    for (std::size_t i = 0; i < 4; ++i) {
        if (channels[i] == 0 || heads[i] == 0 || depths[i] == 0) {
            fail(ErrorKind::Config, "stage " + std::to_string(i + 1) + " has a zero channel/head/depth entry");
        }
        if (channels[i] % heads[i] != 0) {
            fail(ErrorKind::Config, "stage " + std::to_string(i + 1) + ": heads " + std::to_string(heads[i]) +
                                        " do not divide channels " + std::to_string(channels[i]));
        }
        if (i > 0 && channels[i] != 2 * channels[i - 1]) {
            fail(ErrorKind::Config, "stage channels must double per stage");
        }
    }
    if (window == 0) fail(ErrorKind::Config, "window size must be positive");
    if (mlp_ratio == 0) fail(ErrorKind::Config, "mlp ratio must be positive");
}

namespace layout {

std::vector<std::ptrdiff_t> patch_partition(std::size_t height, std::size_t width, std::size_t patch,
                                            std::size_t channels) {
    if (height % patch || width % patch) {
        fail(ErrorKind::Shape, "grid " + std::to_string(height) + "x" + std::to_string(width) +
                                   " is not divisible by patch size " + std::to_string(patch));
    }
    const std::size_t gh = height / patch, gw = width / patch, dim = patch * patch * channels;
    std::vector<std::ptrdiff_t> index(gh * gw * dim);
    for (std::size_t r = 0; r < gh; ++r)
        for (std::size_t c = 0; c < gw; ++c)
            for (std::size_t dy = 0; dy < patch; ++dy)
                for (std::size_t dx = 0; dx < patch; ++dx)
                    for (std::size_t ch = 0; ch < channels; ++ch) {
                        const std::size_t out = (r * gw + c) * dim + (dy * patch + dx) * channels + ch;
                        const std::size_t in = ((r * patch + dy) * width + (c * patch + dx)) * channels + ch;
                        index[out] = static_cast<std::ptrdiff_t>(in);
                    }
    return index;
}

std::vector<std::ptrdiff_t> patch_unpartition(std::size_t height, std::size_t width, std::size_t patch,
                                              std::size_t channels) {
    const auto forward = patch_partition(height, width, patch, channels);
    std::vector<std::ptrdiff_t> index(forward.size());
    for (std::size_t i = 0; i < forward.size(); ++i) index[static_cast<std::size_t>(forward[i])] = static_cast<std::ptrdiff_t>(i);
    return index;
}

Windows windows(std::size_t height, std::size_t width, std::size_t channels, std::size_t window) {
    Windows w;
    w.window_h = std::min(window, height);
    w.window_w = std::min(window, width);
    const std::size_t nh = (height + w.window_h - 1) / w.window_h;
    const std::size_t nw = (width + w.window_w - 1) / w.window_w;
    w.count = nh * nw;
    const std::size_t per = w.window_h * w.window_w;
    w.partition.assign(w.count * per * channels, -1);
    w.restore.assign(height * width * channels, -1);
    for (std::size_t wr = 0; wr < nh; ++wr)
        for (std::size_t wc = 0; wc < nw; ++wc)
            for (std::size_t i = 0; i < w.window_h; ++i)
                for (std::size_t j = 0; j < w.window_w; ++j) {
                    const std::size_t r = wr * w.window_h + i, c = wc * w.window_w + j;
                    if (r >= height || c >= width) continue;
                    const std::size_t token = (wr * nw + wc) * per + i * w.window_w + j;
                    for (std::size_t ch = 0; ch < channels; ++ch) {
                        const std::size_t padded = token * channels + ch;
                        const std::size_t grid = (r * width + c) * channels + ch;
                        w.partition[padded] = static_cast<std::ptrdiff_t>(grid);
                        w.restore[grid] = static_cast<std::ptrdiff_t>(padded);
                    }
                }
    return w;
}

std::vector<std::ptrdiff_t> merge_2x2(std::size_t height, std::size_t width, std::size_t channels) {
    if (height % 2 || width % 2) {
        fail(ErrorKind::Shape, "patch merging needs even grid dims, got " + std::to_string(height) + "x" +
                                   std::to_string(width));
    }
    const std::size_t gh = height / 2, gw = width / 2;
    // Neighbour order (0,0), (1,0), (0,1), (1,1).
    constexpr std::size_t dys[4] = {0, 1, 0, 1};
    constexpr std::size_t dxs[4] = {0, 0, 1, 1};
    std::vector<std::ptrdiff_t> index(gh * gw * 4 * channels);
    for (std::size_t r = 0; r < gh; ++r)
        for (std::size_t c = 0; c < gw; ++c)
            for (std::size_t n = 0; n < 4; ++n)
                for (std::size_t ch = 0; ch < channels; ++ch) {
                    const std::size_t out = ((r * gw + c) * 4 + n) * channels + ch;
                    const std::size_t in = ((2 * r + dys[n]) * width + (2 * c + dxs[n])) * channels + ch;
                    index[out] = static_cast<std::ptrdiff_t>(in);
                }
    return index;
}

}  // namespace layout

PatchPartition::PatchPartition(std::size_t out_channels, Rng& rng) : embed(48, out_channels, rng) {}

FeatureMap PatchPartition::forward(Binder& bind, const Image& image) {
    if (image.height % 4 || image.width % 4) {
        fail(ErrorKind::Shape, "image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                                   " is not divisible into 4x4 patches");
    }
    FeatureMap f;
    f.stage = 1;
    f.height = image.height / 4;
    f.width = image.width / 4;
    auto patches = ad::gather(ad::constant(image.pixels), layout::patch_partition(image.height, image.width, 4, 3),
                              {f.height * f.width, 48});
    f.data = embed.forward(bind, patches);
    return f;
}

void PatchPartition::collect(NamedParameters& out, const std::string& prefix) { embed.collect(out, prefix + ".embed"); }

WindowBlock::WindowBlock(std::size_t channels, std::size_t heads_, std::size_t window_, std::size_t mlp_ratio, Rng& rng)
    : heads(heads_),
      window(window_),
      norm(channels),
      qkv(channels, 3 * channels, rng),
      proj(channels, channels, rng),
      mlp(channels, channels * mlp_ratio, rng) {
    if (heads == 0 || channels % heads != 0) {
        fail(ErrorKind::Config, "window attention: heads " + std::to_string(heads) + " do not divide channels " +
                                    std::to_string(channels));
    }
}

ad::Var WindowBlock::attention_branch(Binder& bind, const ad::Var& x, std::size_t height, std::size_t width) {
    const std::size_t channels = x->value.cols();
    if (channels % heads != 0) {
        fail(ErrorKind::Config, "window attention: heads " + std::to_string(heads) + " do not divide channels " +
                                    std::to_string(channels));
    }
    const auto win = layout::windows(height, width, channels, window);
    const std::size_t padded_tokens = win.count * win.window_h * win.window_w;
    auto tokens = ad::gather(norm.forward(bind, x), win.partition, {padded_tokens, channels});
    auto qkv_out = qkv.forward(bind, tokens);
    auto q = ad::slice_cols(qkv_out, 0, channels);
    auto k = ad::slice_cols(qkv_out, channels, 2 * channels);
    auto v = ad::slice_cols(qkv_out, 2 * channels, 3 * channels);
    const double scale = 1.0 / std::sqrt(static_cast<double>(channels / heads));
    auto attended = proj.forward(bind, ad::attention(q, k, v, heads, win.count, scale));
    auto restored = ad::gather(attended, win.restore, {height * width, channels});
    return ad::add(x, restored);
}

FeatureMap WindowBlock::forward(Binder& bind, const FeatureMap& f) {
    FeatureMap out = f;
    out.data = mlp.forward(bind, attention_branch(bind, f.data, f.height, f.width));
    return out;
}

void WindowBlock::collect(NamedParameters& out, const std::string& prefix) {
    norm.collect(out, prefix + ".norm");
    qkv.collect(out, prefix + ".qkv");
    proj.collect(out, prefix + ".proj");
    mlp.collect(out, prefix + ".mlp");
}

PatchMerging::PatchMerging(std::size_t channels, Rng& rng) : reduce(4 * channels, 2 * channels, rng) {}

FeatureMap PatchMerging::forward(Binder& bind, const FeatureMap& f) {
    const std::size_t channels = f.channels();
    FeatureMap out;
    out.stage = f.stage + 1;
    out.height = f.height / 2;
    out.width = f.width / 2;
    auto merged = ad::gather(f.data, layout::merge_2x2(f.height, f.width, channels), {out.height * out.width, 4 * channels});
    out.data = reduce.forward(bind, merged);
    return out;
}

void PatchMerging::collect(NamedParameters& out, const std::string& prefix) { reduce.collect(out, prefix + ".reduce"); }

PatchExpand::PatchExpand(std::size_t in_channels, std::size_t target, Rng& rng) : target_channels(target) {
    if (target == 0 || in_channels < 16 * target) {
        fail(ErrorKind::Constraint, "patch expanding needs C_i >= 16*C_t: C_i=" + std::to_string(in_channels) +
                                        ", C_t=" + std::to_string(target) + " (needs " + std::to_string(16 * target) + ")");
    }
    linear = Linear(in_channels, 16 * target, rng);
}

ad::Var PatchExpand::forward(Binder& bind, const FeatureMap& f) {
    if (f.channels() != linear.in_features()) {
        fail(ErrorKind::Shape, "patch expanding expects " + std::to_string(linear.in_features()) + " channels, got " +
                                   std::to_string(f.channels()));
    }
    auto widened = linear.forward(bind, f.data);
    const std::size_t h = 4 * f.height, w = 4 * f.width;
    return ad::gather(widened, layout::patch_unpartition(h, w, 4, target_channels), {h * w, target_channels});
}

void PatchExpand::collect(NamedParameters& out, const std::string& prefix) { linear.collect(out, prefix + ".linear"); }

Backbone::Backbone(const BackboneConfig& cfg, Rng& rng) : config(cfg) {
    config.validate();
    partition = PatchPartition(config.channels[0], rng);
    for (std::size_t s = 0; s < 4; ++s) {
        if (s > 0) merges[s - 1] = PatchMerging(config.channels[s - 1], rng);
        for (std::size_t d = 0; d < config.depths[s]; ++d) {
            stages[s].emplace_back(config.channels[s], config.heads[s], config.window, config.mlp_ratio, rng);
        }
        out_norms[s] = LayerNorm(config.channels[s]);
    }
}

std::array<FeatureMap, 4> Backbone::forward(Binder& bind, const Image& image) {
    if (image.height % 32 || image.width % 32) {
        fail(ErrorKind::Shape, "image sides must be divisible by 32, got " + std::to_string(image.height) + "x" +
                                   std::to_string(image.width));
    }
    std::array<FeatureMap, 4> features;
    FeatureMap x = partition.forward(bind, image);
    for (std::size_t s = 0; s < 4; ++s) {
        if (s > 0) x = merges[s - 1].forward(bind, x);
        for (auto& block : stages[s]) x = block.forward(bind, x);
        features[s] = x;
        features[s].data = out_norms[s].forward(bind, x.data);
    }
    return features;
}

void Backbone::collect(NamedParameters& out, const std::string& prefix) {
    partition.collect(out, prefix + ".partition");
    for (std::size_t s = 0; s < 4; ++s) {
        const std::string stage = prefix + ".stage" + std::to_string(s + 1);
        if (s > 0) merges[s - 1].collect(out, stage + ".merge");
        for (std::size_t d = 0; d < stages[s].size(); ++d) stages[s][d].collect(out, stage + ".block" + std::to_string(d));
        out_norms[s].collect(out, stage + ".out_norm");
    }
}

std::size_t stage_for_factor(std::size_t factor) {
    switch (factor) {
        case 2: return 2;
        case 4: return 3;
        case 8: return 4;
        default:
            fail(ErrorKind::Config, "downsampling factor must be one of {2, 4, 8}, got " + std::to_string(factor));
    }
}

Decoder::Decoder(const BackboneConfig& cfg, std::size_t factor_, std::size_t latent_channels_, Rng& rng)
    : factor(factor_), latent_channels(latent_channels_), top_stage(stage_for_factor(factor_)) {
    const auto& ch = cfg.channels;
    unexpand = Linear(16 * latent_channels, ch[top_stage - 1], rng);
    top_block = FeedForward(ch[top_stage - 1], 2 * ch[top_stage - 1], rng);
    for (std::size_t s = top_stage; s > 1; --s) {
        expands.emplace_back(ch[s - 1], 4 * ch[s - 2], rng);
        blocks.emplace_back(ch[s - 2], 2 * ch[s - 2], rng);
    }
    to_pixels = Linear(ch[0], 48, rng);
}

ad::Var Decoder::forward(Binder& bind, const FeatureMap& latent) {
    if (latent.channels() != latent_channels || latent.height % 4 || latent.width % 4) {
        fail(ErrorKind::Shape, "latent " + std::to_string(latent.height) + "x" + std::to_string(latent.width) + "x" +
                                   std::to_string(latent.channels()) + " does not match decoder (C_t=" +
                                   std::to_string(latent_channels) + ")");
    }
    std::size_t h = latent.height / 4, w = latent.width / 4;
    auto blocks4 = ad::gather(latent.data, layout::patch_partition(latent.height, latent.width, 4, latent_channels),
                              {h * w, 16 * latent_channels});
    auto x = top_block.forward(bind, ad::gelu(unexpand.forward(bind, blocks4)));
    for (std::size_t i = 0; i < expands.size(); ++i) {
        const std::size_t out_channels = expands[i].out_features() / 4;
        auto wide = expands[i].forward(bind, x);
        x = ad::gather(wide, layout::patch_unpartition(2 * h, 2 * w, 2, out_channels), {4 * h * w, out_channels});
        h *= 2;
        w *= 2;
        x = blocks[i].forward(bind, x);
    }
    auto pixels = to_pixels.forward(bind, x);
    auto image = ad::gather(pixels, layout::patch_unpartition(4 * h, 4 * w, 4, 3), {16 * h * w * 3});
    return ad::clamp(image, 0.0, 1.0);
}

Image Decoder::forward_image(Binder& bind, const FeatureMap& latent) {
    auto pixels = forward(bind, latent);
    Image out(latent.height * factor, latent.width * factor);
    out.pixels = pixels->value.reshaped({out.height, out.width, 3});
    return out;
}

void Decoder::collect(NamedParameters& out, const std::string& prefix) {
    unexpand.collect(out, prefix + ".unexpand");
    top_block.collect(out, prefix + ".top");
    for (std::size_t i = 0; i < expands.size(); ++i) {
        expands[i].collect(out, prefix + ".expand" + std::to_string(i));
        blocks[i].collect(out, prefix + ".block" + std::to_string(i));
    }
    to_pixels.collect(out, prefix + ".to_pixels");
}

void validate_autoencoder_config(const AutoencoderConfig& config) {
    config.backbone.validate();
    const std::size_t stage = stage_for_factor(config.factor);
    const std::size_t ci = config.backbone.channels[stage - 1];
    if (config.latent_channels == 0 || ci < 16 * config.latent_channels) {
        fail(ErrorKind::Constraint, "patch expanding needs C_i >= 16*C_t: C_i=" + std::to_string(ci) +
                                        ", C_t=" + std::to_string(config.latent_channels));
    }
}

Autoencoder::Autoencoder(const AutoencoderConfig& cfg, Rng& rng) : config(cfg) {
    validate_autoencoder_config(config);
    backbone = Backbone(config.backbone, rng);
    const std::size_t stage = stage_for_factor(config.factor);
    expand = PatchExpand(config.backbone.channels[stage - 1], config.latent_channels, rng);
    decoder = Decoder(config.backbone, config.factor, config.latent_channels, rng);
}

FeatureMap Autoencoder::latent_from_features(Binder& bind, const std::array<FeatureMap, 4>& features) {
    const FeatureMap& source = features[stage_for_factor(config.factor) - 1];
    FeatureMap latent;
    latent.stage = source.stage;
    latent.height = 4 * source.height;
    latent.width = 4 * source.width;
    latent.data = expand.forward(bind, source);
    return latent;
}

EncodedImage Autoencoder::encode_image(Binder& bind, const Image& image) {
    EncodedImage out;
    out.features = backbone.forward(bind, image);
    out.latent = latent_from_features(bind, out.features);
    return out;
}

Image Autoencoder::decode_latent(Binder& bind, const FeatureMap& latent) { return decoder.forward_image(bind, latent); }

void Autoencoder::collect(NamedParameters& out, const std::string& prefix) {
    backbone.collect(out, prefix + ".backbone");
    expand.collect(out, prefix + ".expand");
    decoder.collect(out, prefix + ".decoder");
}

}  // namespace stldm
