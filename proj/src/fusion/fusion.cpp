#include "fusion/fusion.hpp"

#include <cmath>

#include "common/error.hpp"

namespace stldm {

CrossAttention::CrossAttention(std::size_t channels, std::size_t text_dim, std::size_t heads_, Rng& rng)
    : heads(heads_),
      query(channels, channels, rng),
      key(text_dim, channels, rng),
      value(text_dim, channels, rng),
      out(channels, channels, rng) {
    if (heads == 0 || channels % heads != 0) {
        fail(ErrorKind::Config, "cross-attention heads " + std::to_string(heads) + " do not divide channels " +
                                    std::to_string(channels));
    }
}

std::vector<ad::Var> CrossAttention::head_scores(Binder& bind, const ad::Var& queries, const ad::Var& text) {
    auto keys = key.forward(bind, text);
    const std::size_t channels = keys->value.cols();
    const std::size_t dh = channels / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<ad::Var> scores;
    for (std::size_t h = 0; h < heads; ++h) {
        auto qh = heads == 1 ? queries : ad::slice_cols(queries, h * dh, (h + 1) * dh);
        auto kh = heads == 1 ? keys : ad::slice_cols(keys, h * dh, (h + 1) * dh);
        scores.push_back(ad::scale(ad::matmul_nt(qh, kh), scale));
    }
    return scores;
}

AttentionResult CrossAttention::finish(Binder& bind, const FeatureMap& m, const std::vector<ad::Var>& scores,
                                       const ad::Var& text) {
    auto values = value.forward(bind, text);
    const std::size_t dh = values->value.cols() / heads;
    AttentionResult result;
    std::vector<ad::Var> per_head;
    for (std::size_t h = 0; h < heads; ++h) {
        auto probs = ad::softmax_rows(scores[h]);
        auto vh = heads == 1 ? values : ad::slice_cols(values, h * dh, (h + 1) * dh);
        per_head.push_back(ad::matmul(probs, vh));
        result.attention.push_back(probs);
        result.spatial.push_back(ad::softmax_cols(scores[h]));
    }
    result.aggregated = heads == 1 ? per_head.front() : ad::concat_cols(per_head);
    result.output = m;
    result.output.data = ad::add(m.data, out.forward(bind, result.aggregated));
    return result;
}

AttentionResult CrossAttention::forward(Binder& bind, const FeatureMap& m, const ad::Var& text) {
    auto queries = query.forward(bind, m.data);
    return finish(bind, m, head_scores(bind, queries, text), text);
}

void CrossAttention::collect(NamedParameters& out_params, const std::string& prefix) {
    query.collect(out_params, prefix + ".query");
    key.collect(out_params, prefix + ".key");
    value.collect(out_params, prefix + ".value");
    out.collect(out_params, prefix + ".out");
}

OffsetGenerator::OffsetGenerator(std::size_t channels, std::size_t text_dim, std::size_t dim_, std::size_t heads_,
                                 Rng& rng)
    : dim(dim_),
      heads(heads_),
      from_multimodal(channels, dim_, rng),
      from_visual(channels, dim_, rng),
      from_text(text_dim, dim_, rng),
      norm(dim_),
      qkv(dim_, 3 * dim_, rng),
      proj(dim_, dim_, rng),
      mlp(dim_, 4 * dim_, rng),
      head(dim_, 3, rng),
      grid_out(dim_, channels, rng) {
    if (heads == 0 || dim % heads != 0) fail(ErrorKind::Config, "offset transformer heads must divide its width");
}

OffsetGenerator::Output OffsetGenerator::forward(Binder& bind, const FeatureMap& m, const FeatureMap& v,
                                                 const Tensor& text_with_positions, std::size_t factor,
                                                 const TransformerInputs& inputs) {
    if (!inputs.multimodal && !inputs.visual) {
        fail(ErrorKind::Config, "offset transformer needs M_i or V_i among its inputs");
    }
    if (m.height != v.height || m.width != v.width) {
        fail(ErrorKind::Shape, "M_i and V_i grids differ");
    }
    const std::size_t cells = m.tokens();
    std::vector<ad::Var> parts;
    if (inputs.multimodal) parts.push_back(from_multimodal.forward(bind, m.data));
    if (inputs.visual) parts.push_back(from_visual.forward(bind, v.data));
    std::size_t text_offset = 0;
    if (inputs.text) {
        text_offset = parts.size() * cells;
        parts.push_back(from_text.forward(bind, ad::constant(text_with_positions)));
    }
    for (const auto& p : parts) {
        if (p->value.cols() != dim) fail(ErrorKind::Shape, "normalised token widths differ");
    }
    auto tokens = parts.size() == 1 ? parts.front() : ad::concat_rows(parts);

    auto projected = qkv.forward(bind, norm.forward(bind, tokens));
    auto q = ad::slice_cols(projected, 0, dim);
    auto k = ad::slice_cols(projected, dim, 2 * dim);
    auto val = ad::slice_cols(projected, 2 * dim, 3 * dim);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim / heads));
    auto mixed = ad::add(tokens, proj.forward(bind, ad::attention(q, k, val, heads, 1, scale)));
    mixed = mlp.forward(bind, mixed);

    Output out;
    out.grid_tokens = ad::slice_rows(mixed, 0, cells);
    out.grid_queries = ad::slice_rows(q, 0, cells);
    if (inputs.text) out.text_keys = ad::slice_rows(k, text_offset, text_offset + text_with_positions.rows());
    out.raw = head.forward(bind, ad::avg_pool_grid(out.grid_tokens, m.height, m.width, factor));
    return out;
}

void OffsetGenerator::collect(NamedParameters& out, const std::string& prefix) {
    from_multimodal.collect(out, prefix + ".from_m");
    from_visual.collect(out, prefix + ".from_v");
    from_text.collect(out, prefix + ".from_l");
    norm.collect(out, prefix + ".norm");
    qkv.collect(out, prefix + ".qkv");
    proj.collect(out, prefix + ".proj");
    mlp.collect(out, prefix + ".mlp");
    head.collect(out, prefix + ".head");
    grid_out.collect(out, prefix + ".grid_out");
}

FusionStage::FusionStage(std::size_t stage_, std::size_t channels, std::size_t text_dim, std::size_t offset_dim,
                         std::size_t offset_heads, const DfaStageConfig& cfg, Rng& rng)
    : stage(stage_),
      config(cfg),
      cross(channels, text_dim, cfg.heads, rng),
      offsets(channels, text_dim, offset_dim, offset_heads, rng) {}

AttentionResult FusionStage::plain(Binder& bind, const FeatureMap& m, const ad::Var& spatial_text) {
    return cross.forward(bind, m, spatial_text);
}

AttentionResult FusionStage::dfa(Binder& bind, const FeatureMap& m, const FeatureMap& v, const ad::Var& spatial_text,
                                 const TextEmbedding& text, const DfaFlags& flags, StageTrace* trace) {
    if (flags.mode == AttentionMode::CrossOnly) return plain(bind, m, spatial_text);
    config.validate(m.height, m.width);

    auto gen = offsets.forward(bind, m, v, text.with_positions(), config.sampling_factor, flags.inputs);
    if (flags.mode == AttentionMode::TransformerOnly) return transformer_only(bind, m, gen, text);

    auto grid = make_reference_grid(m.height, m.width, config.sampling_factor);
    auto field = activate_offsets(gen.raw, config.max_offset);
    auto dp = flags.offsets ? field.offsets : ad::constant(Tensor(grid.points.shape()));
    auto dm = flags.scalar ? field.modulation : ad::constant(Tensor({grid.count()}, 1.0));
    auto positions = ad::add(ad::constant(grid.points), dp);

    // Deformed queries: W^q phi(M_i, p + dp), raster order of reference cells.
    auto sampled = ad::bilinear_sample(m.data, m.height, m.width, positions);
    auto queries = cross.query.forward(bind, sampled);

    CompletionLayout layout;
    layout.height = m.height;
    layout.width = m.width;
    layout.anchors = grid.anchors;
    layout.range = static_cast<double>(config.completion_range);
    layout.epsilon = config.epsilon;
    layout.use_cardinality = flags.cardinality;

    StageTrace local;
    std::vector<ad::Var> completed;
    for (auto& scores : cross.head_scores(bind, queries, spatial_text)) {
        completed.push_back(complete_attention(ad::mul_rows(scores, dm), positions, layout, &local.completion));
    }
    if (trace) {
        trace->offsets = OffsetField{dp, dm};
        trace->grid = grid;
        trace->completion = local.completion;
    }
    return cross.finish(bind, m, completed, spatial_text);
}

AttentionResult FusionStage::transformer_only(Binder& bind, const FeatureMap& m, const OffsetGenerator::Output& gen,
                                              const TextEmbedding& text) {
    if (!gen.text_keys) fail(ErrorKind::Config, "transformer-only attention needs text among transformer inputs");
    const std::size_t dim = offsets.dim, heads = offsets.heads, dh = dim / heads;
    auto keys = ad::slice_rows(gen.text_keys, text.spatial.begin, text.spatial.end);
    AttentionResult result;
    for (std::size_t h = 0; h < heads; ++h) {
        auto qh = ad::slice_cols(gen.grid_queries, h * dh, (h + 1) * dh);
        auto kh = ad::slice_cols(keys, h * dh, (h + 1) * dh);
        auto scores = ad::scale(ad::matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
        result.attention.push_back(ad::softmax_rows(scores));
        result.spatial.push_back(ad::softmax_cols(scores));
    }
    result.aggregated = gen.grid_tokens;
    result.output = m;
    result.output.data = ad::add(m.data, offsets.grid_out.forward(bind, gen.grid_tokens));
    return result;
}

void FusionStage::collect(NamedParameters& out, const std::string& prefix) {
    cross.collect(out, prefix + ".cross");
    offsets.collect(out, prefix + ".offsets");
}

FusionConfig FusionConfig::from_backbone(const BackboneConfig& backbone) {
    FusionConfig c;
    c.channels = backbone.channels;
    c.heads = backbone.heads;
    for (std::size_t s = 2; s <= 4; ++s) c.stages[s - 2] = default_dfa_stage(s, backbone.heads[s - 1]);
    return c;
}

void FusionConfig::validate() const {
    if (flags.enabled[0]) fail(ErrorKind::Config, "deformable alignment is not supported at stage 1");
    if (text_dim == 0 || offset_dim == 0) fail(ErrorKind::Config, "text and offset widths must be positive");
    for (std::size_t i = 0; i < 4; ++i) {
        if (heads[i] == 0 || channels[i] % heads[i] != 0) {
            fail(ErrorKind::Config, "fusion heads must divide channels at stage " + std::to_string(i + 1));
        }
    }
    for (const auto& s : stages) {
        if (!(s.max_offset > 0.0) || s.sampling_factor == 0 || s.completion_range < s.sampling_factor || !(s.epsilon > 0.0)) {
            fail(ErrorKind::Config, "invalid deformable stage configuration");
        }
    }
}

GuidanceMap FusionOutput::guidance_map() const {
    GuidanceMap g;
    g.height = height;
    g.width = width;
    g.values = guidance->value.reshaped({height, width});
    return g;
}

FusionModel::FusionModel(const FusionConfig& cfg, Rng& rng) : config(cfg) {
    config.validate();
    first = CrossAttention(config.channels[0], config.text_dim, config.heads[0], rng);
    for (std::size_t s = 2; s <= 4; ++s) {
        merges[s - 2] = PatchMerging(config.channels[s - 2], rng);
        auto stage_cfg = config.stages[s - 2];
        stage_cfg.epsilon = config.epsilon;
        stages[s - 2] = FusionStage(s, config.channels[s - 1], config.text_dim, config.offset_dim, config.offset_heads,
                                    stage_cfg, rng);
    }
}

FusionOutput FusionModel::forward(Binder& bind, const std::array<FeatureMap, 4>& features, const TextEmbedding& text) {
    auto spatial = ad::constant(text.spatial_part());
    if (text.dim() != config.text_dim) {
        fail(ErrorKind::Shape, "text width " + std::to_string(text.dim()) + " does not match fusion width " +
                               std::to_string(config.text_dim));
    }
    FusionOutput out;
    out.stages[0] = first.forward(bind, features[0], spatial);
    for (std::size_t s = 2; s <= 4; ++s) {
        FeatureMap merged = merges[s - 2].forward(bind, out.stages[s - 2].output);
        const FeatureMap& v = features[s - 1];
        if (merged.height != v.height || merged.width != v.width || merged.channels() != v.channels()) {
            fail(ErrorKind::Shape, "fused map and visual features disagree at stage " + std::to_string(s));
        }
        merged.data = ad::add(merged.data, v.data);
        const bool deform = config.flags.enabled[s - 1] && config.flags.mode != AttentionMode::CrossOnly;
        out.stages[s - 1] = deform ? stages[s - 2].dfa(bind, merged, v, spatial, text, config.flags, &out.traces[s - 1])
                                   : stages[s - 2].plain(bind, merged, spatial);
    }
    const auto& last = out.stages[3];
    out.height = last.output.height;
    out.width = last.output.width;
    out.guidance = guidance_from_attention(last.spatial, config.flags.keys);
    return out;
}

void FusionModel::collect(NamedParameters& out, const std::string& prefix) {
    first.collect(out, prefix + ".stage1.cross");
    for (std::size_t s = 2; s <= 4; ++s) {
        merges[s - 2].collect(out, prefix + ".stage" + std::to_string(s) + ".merge");
        stages[s - 2].collect(out, prefix + ".stage" + std::to_string(s));
    }
}

}  // namespace stldm
