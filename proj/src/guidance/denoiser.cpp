#include "guidance/denoiser.hpp"

#include <cmath>

#include "backbone/backbone.hpp"
#include "common/error.hpp"

namespace stldm {

NoiseSchedule build_noise_schedule(std::size_t steps, double beta_start, double beta_end) {
    if (steps < 2) fail(ErrorKind::Config, "noise schedule needs at least 2 steps, got " + std::to_string(steps));
    if (!(beta_start > 0.0) || !(beta_end > beta_start) || !(beta_end < 1.0)) {
        fail(ErrorKind::Config, "noise schedule needs 0 < beta_start < beta_end < 1");
    }
    NoiseSchedule s;
    s.steps = steps;
    double running = 1.0;
    for (std::size_t i = 0; i < steps; ++i) {
        const double b = beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(steps - 1);
        s.beta.push_back(b);
        s.alpha.push_back(1.0 - b);
        running *= 1.0 - b;
        s.alpha_bar.push_back(running);
    }
    return s;
}

void DenoiserConfig::validate() const {
    if (latent_channels == 0 || width == 0 || mid_width == 0 || text_dim == 0) {
        fail(ErrorKind::Config, "denoiser widths must be positive");
    }
    if (heads == 0 || width % heads != 0) fail(ErrorKind::Config, "denoiser heads must divide its width");
    if (width % 2 != 0) fail(ErrorKind::Config, "denoiser width must be even for the time embedding");
    if (steps < 2) fail(ErrorKind::Config, "denoiser needs at least 2 diffusion steps");
}

ToyDenoiser::ToyDenoiser(const DenoiserConfig& cfg, Rng& rng) : config(cfg) {
    config.validate();
    const std::size_t d = config.width, d2 = config.mid_width;
    in = Linear(config.latent_channels, d, rng);
    time = Linear(d, d, rng);
    down = Linear(4 * d, d2, rng);
    mid = FeedForward(d2, 2 * d2, rng);
    up = Linear(d2 + d, d, rng);
    norm = LayerNorm(d);
    query = Linear(d, d, rng);
    key = Linear(config.text_dim, d, rng);
    value = Linear(config.text_dim, d, rng);
    sink_key = Parameter(random_normal({1, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng));
    sink_value = Parameter(Tensor({1, d}));
    attn_out = Linear(d, d, rng);
    tail = FeedForward(d, 2 * d, rng);
    out = Linear(d, config.latent_channels, rng);
}

namespace {

std::vector<std::ptrdiff_t> nearest_up_2x(std::size_t height, std::size_t width, std::size_t channels) {
    std::vector<std::ptrdiff_t> index(height * width * channels);
    const std::size_t half_w = width / 2;
    for (std::size_t r = 0; r < height; ++r)
        for (std::size_t c = 0; c < width; ++c)
            for (std::size_t k = 0; k < channels; ++k)
                index[(r * width + c) * channels + k] =
                    static_cast<std::ptrdiff_t>(((r / 2) * half_w + c / 2) * channels + k);
    return index;
}

}  // namespace

DenoiserOutput ToyDenoiser::forward(Binder& bind, const ad::Var& z, std::size_t height, std::size_t width,
                                    std::size_t t, const Tensor& appearance_text) {
    if (appearance_text.empty() || appearance_text.rank() != 2 || appearance_text.rows() == 0) {
        fail(ErrorKind::Data, "denoiser needs a non-empty appearance text slice");
    }
    if (appearance_text.cols() != config.text_dim) {
        fail(ErrorKind::Shape, "appearance text width " + std::to_string(appearance_text.cols()) +
                                   " does not match denoiser text width " + std::to_string(config.text_dim));
    }
    if (height % 2 || width % 2) {
        fail(ErrorKind::Shape, "denoiser latent " + std::to_string(height) + "x" + std::to_string(width) +
                                   " must have even sides");
    }
    if (z->value.rows() != height * width || z->value.cols() != config.latent_channels) {
        fail(ErrorKind::Shape, "latent " + shape_to_string(z->shape()) + " does not match " + std::to_string(height) +
                                   "x" + std::to_string(width) + "x" + std::to_string(config.latent_channels));
    }
    if (t < 1 || t > config.steps) fail(ErrorKind::Config, "timestep " + std::to_string(t) + " outside 1..T");

    const std::size_t d = config.width, d2 = config.mid_width, tokens = appearance_text.rows();
    const Tensor table = sinusoidal_positional_encoding(config.steps + 1, d);
    const Tensor row({1, d}, std::vector<double>(table.data() + t * d, table.data() + (t + 1) * d));
    auto temb = ad::reshape(time.forward(bind, ad::constant(row)), {d});

    auto skip = ad::gelu(ad::add_bias(in.forward(bind, z), temb));
    auto pooled = ad::gather(skip, layout::merge_2x2(height, width, d), {height * width / 4, 4 * d});
    auto middle = mid.forward(bind, ad::gelu(down.forward(bind, pooled)));
    auto upsampled = ad::gather(middle, nearest_up_2x(height, width, d2), {height * width, d2});
    auto h = ad::gelu(up.forward(bind, ad::concat_cols({upsampled, skip})));

    auto text = ad::constant(appearance_text);
    auto q = query.forward(bind, norm.forward(bind, h));
    auto k = ad::concat_rows({bind(sink_key), key.forward(bind, text)});
    auto v = ad::concat_rows({bind(sink_value), value.forward(bind, text)});

    DenoiserOutput result;
    const std::size_t dh = d / config.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<ad::Var> mixed;
    ad::Var mean_weights;
    for (std::size_t j = 0; j < config.heads; ++j) {
        auto qh = ad::slice_cols(q, j * dh, (j + 1) * dh);
        auto kh = ad::slice_cols(k, j * dh, (j + 1) * dh);
        auto vh = ad::slice_cols(v, j * dh, (j + 1) * dh);
        auto w = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), scale));
        result.head_weights.push_back(w);
        mixed.push_back(ad::matmul(w, vh));
        auto part = ad::slice_cols(w, 1, 1 + tokens);
        mean_weights = mean_weights ? ad::add(mean_weights, part) : part;
    }
    result.appearance = ad::scale(mean_weights, 1.0 / static_cast<double>(config.heads));
    h = ad::add(h, attn_out.forward(bind, config.heads == 1 ? mixed.front() : ad::concat_cols(mixed)));
    result.noise = out.forward(bind, tail.forward(bind, h));
    return result;
}

void ToyDenoiser::collect(NamedParameters& o, const std::string& prefix) {
    in.collect(o, prefix + ".in");
    time.collect(o, prefix + ".time");
    down.collect(o, prefix + ".down");
    mid.collect(o, prefix + ".mid");
    up.collect(o, prefix + ".up");
    norm.collect(o, prefix + ".norm");
    query.collect(o, prefix + ".query");
    key.collect(o, prefix + ".key");
    value.collect(o, prefix + ".value");
    o.emplace_back(prefix + ".sink_key", &sink_key);
    o.emplace_back(prefix + ".sink_value", &sink_value);
    attn_out.collect(o, prefix + ".attn_out");
    tail.collect(o, prefix + ".tail");
    out.collect(o, prefix + ".out");
}

}  // namespace stldm
