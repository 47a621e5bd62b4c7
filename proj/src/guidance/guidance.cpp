#include "guidance/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "common/error.hpp"

namespace stldm {

void GuidanceConfig::validate(std::size_t steps) const {
    if (!(eta >= 0.0) || !std::isfinite(eta)) fail(ErrorKind::Config, "guidance strength eta must be >= 0");
    if (guided_steps > steps) {
        fail(ErrorKind::Config, "guided steps " + std::to_string(guided_steps) + " exceed T=" + std::to_string(steps));
    }
    if (repeats == 0) fail(ErrorKind::Config, "guidance repeats must be >= 1");
    if (!(beta_frac > 0.0 && beta_frac < 1.0) || !(retry_beta_frac > 0.0 && retry_beta_frac < 1.0)) {
        fail(ErrorKind::Config, "activation thresholds must lie in (0, 1)");
    }
    if (morph_kernel == 0) fail(ErrorKind::Config, "morphological kernel must be >= 1");
}

Tensor resize_points(std::size_t src_h, std::size_t src_w, std::size_t dst_h, std::size_t dst_w) {
    Tensor points({dst_h * dst_w, 2});
    const double sy = static_cast<double>(src_h) / static_cast<double>(dst_h);
    const double sx = static_cast<double>(src_w) / static_cast<double>(dst_w);
    for (std::size_t r = 0; r < dst_h; ++r)
        for (std::size_t c = 0; c < dst_w; ++c) {
            const double y = (static_cast<double>(r) + 0.5) * sy - 0.5;
            const double x = (static_cast<double>(c) + 0.5) * sx - 0.5;
            points.at(r * dst_w + c, 0) = std::clamp(y, 0.0, static_cast<double>(src_h - 1));
            points.at(r * dst_w + c, 1) = std::clamp(x, 0.0, static_cast<double>(src_w - 1));
        }
    return points;
}

GuidanceMap resize_guidance(const GuidanceMap& g, std::size_t height, std::size_t width) {
    if (height == 0 || width == 0) fail(ErrorKind::Shape, "guidance resize target must be at least 1x1");
    if (g.values.size() != g.height * g.width || g.values.empty()) fail(ErrorKind::Shape, "malformed guidance map");
    GuidanceMap out;
    out.height = height;
    out.width = width;
    if (height == g.height && width == g.width) {
        out.values = g.values;
        return out;
    }
    const Tensor points = resize_points(g.height, g.width, height, width);
    auto grid = ad::constant(g.values.reshaped({g.height * g.width, 1}));
    Tensor resized = ad::bilinear_sample(grid, g.height, g.width, ad::constant(points))->value;
    const double peak = max_value(resized);
    if (peak > 0.0)
        for (auto& v : resized.values()) v /= peak;
    out.values = resized.reshaped({height, width});
    return out;
}

Tensor activate_and_dilate(const GuidanceMap& g, double beta_frac, DilationMode mode, std::size_t kernel,
                           bool dilate) {
    const std::size_t h = g.height, w = g.width;
    if (g.values.size() != h * w || g.values.empty()) fail(ErrorKind::Shape, "malformed guidance map");
    const double beta = beta_frac * max_value(g.values);
    Tensor mask({h * w});
    std::size_t r0 = h, r1 = 0, c0 = w, c1 = 0, active = 0;
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            if (!(g.values[r * w + c] > beta)) continue;
            mask[r * w + c] = 1.0;
            ++active;
            r0 = std::min(r0, r);
            r1 = std::max(r1, r);
            c0 = std::min(c0, c);
            c1 = std::max(c1, c);
        }
    if (active == 0) fail(ErrorKind::GuidanceEmpty, "no guidance cell above threshold " + std::to_string(beta));
    if (!dilate) return mask;

    Tensor out({h * w});
    if (mode == DilationMode::BoundingBox) {
        for (std::size_t r = r0; r <= r1; ++r)
            for (std::size_t c = c0; c <= c1; ++c) out[r * w + c] = 1.0;
        return out;
    }
    const auto lo = static_cast<std::ptrdiff_t>((kernel - 1) / 2);
    const auto hi = static_cast<std::ptrdiff_t>(kernel / 2);
    for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(h); ++r)
        for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(w); ++c) {
            bool hit = false;
            for (std::ptrdiff_t dy = -lo; dy <= hi && !hit; ++dy)
                for (std::ptrdiff_t dx = -lo; dx <= hi && !hit; ++dx) {
                    const auto y = r + dy, x = c + dx;
                    if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(h) || x >= static_cast<std::ptrdiff_t>(w))
                        continue;
                    hit = mask[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] > 0.0;
                }
            if (hit) out[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)] = 1.0;
        }
    return out;
}

Tensor guidance_mask(const GuidanceMap& resized, const GuidanceConfig& cfg) {
    if (!cfg.activation) return resized.values.reshaped({resized.height * resized.width});
    try {
        return activate_and_dilate(resized, cfg.beta_frac, cfg.dilation, cfg.morph_kernel, cfg.dilate);
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::GuidanceEmpty) throw;
    }
    return activate_and_dilate(resized, cfg.retry_beta_frac, cfg.dilation, cfg.morph_kernel, cfg.dilate);
}

namespace {

void check_mask(const Tensor& attention, const Tensor& mask) {
    if (attention.rank() != 2 || mask.size() != attention.rows()) {
        fail(ErrorKind::Shape, "mask of " + std::to_string(mask.size()) + " cells does not match attention " +
                                   shape_to_string(attention.shape()));
    }
}

Tensor broadcast_mask(const Tensor& mask, std::size_t keys) {
    Tensor out({mask.size(), keys});
    for (std::size_t i = 0; i < mask.size(); ++i)
        for (std::size_t j = 0; j < keys; ++j) out.at(i, j) = mask[i];
    return out;
}

}  // namespace

double in_mask_fraction(const Tensor& attention, const Tensor& mask) {
    check_mask(attention, mask);
    double inside = 0.0, total = 0.0;
    for (std::size_t i = 0; i < attention.rows(); ++i)
        for (std::size_t j = 0; j < attention.cols(); ++j) {
            inside += mask[i] * attention.at(i, j);
            total += attention.at(i, j);
        }
    if (!(total > 0.0)) fail(ErrorKind::Numeric, "attention mass must be positive");
    return inside / total;
}

double energy(const Tensor& attention, const Tensor& mask) {
    const double gap = 1.0 - in_mask_fraction(attention, mask);
    return gap * gap;
}

ad::Var energy(const ad::Var& attention, const Tensor& mask) {
    check_mask(attention->value, mask);
    auto inside = ad::sum(ad::mul(attention, ad::constant(broadcast_mask(mask, attention->value.cols()))));
    auto ratio = ad::div(inside, ad::sum(attention));
    return ad::square(ad::add_scalar(ad::scale(ratio, -1.0), 1.0));
}

Tensor energy_gradient(ToyDenoiser& denoiser, const LatentState& z, const Tensor& appearance_text, const Tensor& mask,
                       double* energy_value) {
    Binder frozen(false);
    auto zv = ad::variable(z.z);
    auto out = denoiser.forward(frozen, zv, z.height, z.width, z.timestep, appearance_text);
    auto e = energy(out.appearance, mask);
    if (energy_value) *energy_value = e->value.item();
    ad::backward(e);
    return zv->grad.empty() ? Tensor(z.z.shape()) : zv->grad;
}

LatentState guided_latent_update(ToyDenoiser& denoiser, const LatentState& z, const Tensor& mask,
                                 const Tensor& appearance_text, const NoiseSchedule& schedule,
                                 const GuidanceConfig& cfg) {
    const double abar = schedule.alpha_bar_at(z.timestep);
    const double coef = cfg.eta * std::sqrt((1.0 - abar) / abar);
    LatentState next = z;
    for (std::size_t r = 0; r < cfg.repeats; ++r) {
        Tensor g = energy_gradient(denoiser, next, appearance_text, mask);
        for (std::size_t i = 0; i < g.size(); ++i) next.z[i] -= coef * g[i];
        require_finite(next.z, "guided latent");
    }
    return next;
}

SampleResult sample_with_guidance(ToyDenoiser& denoiser, const LatentState& z_T, const Tensor& mask,
                                  const Tensor& appearance_text, const NoiseSchedule& schedule,
                                  const GuidanceConfig& cfg, std::uint64_t seed) {
    const std::size_t steps = schedule.steps;
    cfg.validate(steps);
    if (z_T.timestep != steps) fail(ErrorKind::Config, "sampling must start at t=T");
    Rng rng(seed);
    std::vector<Tensor> noise;
    for (std::size_t t = steps; t >= 2; --t) noise.push_back(random_normal(z_T.z.shape(), 1.0, rng));

    SampleResult result;
    const std::size_t guided = cfg.enabled ? cfg.guided_steps : 0;
    LatentState z = z_T;
    Binder frozen(false);
    for (std::size_t t = steps; t >= 1; --t) {
        const std::size_t k = steps - t;
        z.timestep = t;
        TraceRow row;
        row.step = k;
        if (k < guided) {
            row.energy_before = energy(denoiser.forward(frozen, ad::constant(z.z), z.height, z.width, t,
                                                        appearance_text).appearance->value, mask);
            z = guided_latent_update(denoiser, z, mask, appearance_text, schedule, cfg);
            ++result.guided_steps;
        }
        auto out = denoiser.forward(frozen, ad::constant(z.z), z.height, z.width, t, appearance_text);
        row.energy_after = energy(out.appearance->value, mask);
        if (k >= guided) row.energy_before = row.energy_after;
        row.in_mask = in_mask_fraction(out.appearance->value, mask);
        result.trace.push_back(row);

        const Tensor& eps = out.noise->value;
        const double beta = schedule.beta_at(t), abar = schedule.alpha_bar_at(t);
        const double c_eps = beta / std::sqrt(1.0 - abar), c_scale = 1.0 / std::sqrt(schedule.alpha_at(t));
        for (std::size_t i = 0; i < z.z.size(); ++i) z.z[i] = (z.z[i] - c_eps * eps[i]) * c_scale;
        if (t > 1) {
            const Tensor& n = noise[k];
            const double sigma = std::sqrt(beta);
            for (std::size_t i = 0; i < z.z.size(); ++i) z.z[i] += sigma * n[i];
        }
        require_finite(z.z, "latent at step " + std::to_string(k));
    }
    z.timestep = 0;
    auto last = denoiser.forward(frozen, ad::constant(z.z), z.height, z.width, 1, appearance_text);
    result.final_energy = energy(last.appearance->value, mask);
    result.final_in_mask = in_mask_fraction(last.appearance->value, mask);
    result.z0 = std::move(z);
    return result;
}

void write_trace(std::ostream& os, const std::vector<TraceRow>& trace) {
    char buf[160];
    for (const auto& r : trace) {
        std::snprintf(buf, sizeof buf, "%zu\t%.9f\t%.9f\t%.9f\n", r.step, r.energy_before, r.energy_after, r.in_mask);
        os << buf;
    }
}

}  // namespace stldm
