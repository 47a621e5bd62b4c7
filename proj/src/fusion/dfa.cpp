#include "fusion/dfa.hpp"

#include <cmath>

#include "common/error.hpp"

namespace stldm {

void DfaStageConfig::validate(std::size_t height, std::size_t width) const {
    if (sampling_factor == 0 || height % sampling_factor || width % sampling_factor) {
        fail(ErrorKind::Shape, "sampling factor " + std::to_string(sampling_factor) + " does not divide grid " +
                                   std::to_string(height) + "x" + std::to_string(width));
    }
    if (!(max_offset > 0.0)) fail(ErrorKind::Config, "max offset s_i must be positive");
    if (completion_range < sampling_factor) {
        fail(ErrorKind::Config, "completion range R=" + std::to_string(completion_range) +
                                    " must be >= sampling factor " + std::to_string(sampling_factor));
    }
    if (heads == 0) fail(ErrorKind::Config, "DFA heads must be positive");
    if (!(epsilon > 0.0)) fail(ErrorKind::Config, "completion epsilon must be positive");
}

DfaStageConfig default_dfa_stage(std::size_t stage, std::size_t heads) {
    DfaStageConfig c;
    c.heads = heads;
    switch (stage) {
        case 2: c.sampling_factor = 4; c.max_offset = 8.0; c.completion_range = 8; break;
        case 3: c.sampling_factor = 2; c.max_offset = 4.0; c.completion_range = 4; break;
        case 4: c.sampling_factor = 1; c.max_offset = 2.0; c.completion_range = 2; break;
        default: fail(ErrorKind::Config, "deformable alignment is defined for stages 2-4, got " + std::to_string(stage));
    }
    return c;
}

ReferenceGrid make_reference_grid(std::size_t height, std::size_t width, std::size_t factor) {
    if (factor == 0 || height % factor || width % factor) {
        fail(ErrorKind::Shape, "sampling factor " + std::to_string(factor) + " does not divide grid " +
                                   std::to_string(height) + "x" + std::to_string(width));
    }
    ReferenceGrid g;
    g.height = height;
    g.width = width;
    g.factor = factor;
    g.rows = height / factor;
    g.cols = width / factor;
    g.points = Tensor({g.rows * g.cols, 2});
    g.anchors.resize(g.rows * g.cols);
    const double centre = (static_cast<double>(factor) - 1.0) / 2.0;
    const std::size_t anchor_offset = (factor - 1) / 2;
    for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t c = 0; c < g.cols; ++c) {
            const std::size_t k = r * g.cols + c;
            g.points.at(k, 0) = static_cast<double>(factor * r) + centre;
            g.points.at(k, 1) = static_cast<double>(factor * c) + centre;
            g.anchors[k] = (factor * r + anchor_offset) * width + factor * c + anchor_offset;
        }
    return g;
}

std::vector<double> bilinear_sample(const Tensor& grid, std::size_t height, std::size_t width, double row, double col) {
    auto out = ad::bilinear_sample(ad::constant(grid), height, width, ad::constant(Tensor::matrix(1, 2, {row, col})));
    return out->value.storage();
}

OffsetField activate_offsets(const ad::Var& raw, double max_offset) {
    if (raw->value.rank() != 2 || raw->value.cols() != 3) {
        fail(ErrorKind::Shape, "offset head output must be [N x 3], got " + shape_to_string(raw->shape()));
    }
    const std::size_t n = raw->value.rows();
    OffsetField field;
    field.offsets = ad::scale(ad::tanh(ad::slice_cols(raw, 0, 2)), max_offset);
    field.modulation = ad::reshape(ad::sigmoid(ad::slice_cols(raw, 2, 3)), {n});
    return field;
}

namespace {

struct Neighbourhood {
    std::vector<std::size_t> members;  // sampled row indices inside the square
    std::vector<double> weights;       // 1 / (d + eps)
    std::vector<double> distances;
    double weight_sum = 0.0;
    double factor = 1.0;               // card / Avg(card) or 1
    bool fallback = false;
};

}  // namespace

ad::Var complete_attention(const ad::Var& sampled_scores, const ad::Var& positions, const CompletionLayout& layout,
                           CompletionStats* stats) {
    const Tensor& scores = sampled_scores->value;
    const Tensor& pos = positions->value;
    const std::size_t ns = scores.rows(), keys = scores.cols();
    const std::size_t cells = layout.height * layout.width;
    if (layout.anchors.size() != ns || pos.rows() != ns || pos.cols() != 2) {
        fail(ErrorKind::Shape, "complete_attention: anchors/positions do not match sampled rows");
    }
    if (!(layout.epsilon > 0.0)) fail(ErrorKind::Config, "completion epsilon must be positive");

    std::vector<bool> sampled(cells, false);
    for (auto a : layout.anchors) {
        if (a >= cells) fail(ErrorKind::Shape, "complete_attention: anchor outside grid");
        sampled[a] = true;
    }

    const double half = layout.range / 2.0;
    std::vector<std::size_t> unsampled;
    std::vector<Neighbourhood> hoods;
    double card_total = 0.0;
    for (std::size_t u = 0; u < cells; ++u) {
        if (sampled[u]) continue;
        const double r = static_cast<double>(u / layout.width), c = static_cast<double>(u % layout.width);
        Neighbourhood hood;
        for (std::size_t k = 0; k < ns; ++k) {
            const double dy = pos.at(k, 0) - r, dx = pos.at(k, 1) - c;
            if (std::abs(dy) > half || std::abs(dx) > half) continue;
            const double d = std::sqrt(dy * dy + dx * dx);
            hood.members.push_back(k);
            hood.distances.push_back(d);
            hood.weights.push_back(1.0 / (d + layout.epsilon));
            hood.weight_sum += hood.weights.back();
        }
        card_total += static_cast<double>(hood.members.size());
        unsampled.push_back(u);
        hoods.push_back(std::move(hood));
    }
    const double avg_card = unsampled.empty() ? 0.0 : card_total / static_cast<double>(unsampled.size());

    std::vector<double> column_mean(keys, 0.0);
    for (std::size_t k = 0; k < ns; ++k)
        for (std::size_t j = 0; j < keys; ++j) column_mean[j] += scores.at(k, j) / static_cast<double>(ns);

    Tensor out({cells, keys});
    for (std::size_t k = 0; k < ns; ++k)
        for (std::size_t j = 0; j < keys; ++j) out.at(layout.anchors[k], j) = scores.at(k, j);

    std::size_t fallback_rows = 0;
    for (std::size_t i = 0; i < unsampled.size(); ++i) {
        Neighbourhood& hood = hoods[i];
        const std::size_t u = unsampled[i];
        if (hood.members.empty() || avg_card == 0.0) {
            hood.fallback = true;
            ++fallback_rows;
            for (std::size_t j = 0; j < keys; ++j) out.at(u, j) = column_mean[j];
            continue;
        }
        hood.factor = layout.use_cardinality ? static_cast<double>(hood.members.size()) / avg_card : 1.0;
        for (std::size_t j = 0; j < keys; ++j) {
            double acc = 0.0;
            for (std::size_t m = 0; m < hood.members.size(); ++m) acc += hood.weights[m] * scores.at(hood.members[m], j);
            out.at(u, j) = hood.factor * acc / hood.weight_sum;
        }
    }
    if (stats) {
        stats->fallback_rows += fallback_rows;
        stats->average_cardinality = avg_card;
    }

    auto anchors = layout.anchors;
    const std::size_t width = layout.width;
    return ad::make_node(
        "complete_attention", std::move(out), {sampled_scores, positions},
        [=, unsampled = std::move(unsampled), hoods = std::move(hoods)](ad::Node& self) {
            ad::Node& ps = *self.parents[0];
            ad::Node& pp = *self.parents[1];
            Tensor dscores(ps.shape());
            Tensor dpos(pp.shape());
            const Tensor& s = ps.value;
            for (std::size_t k = 0; k < ns; ++k)
                for (std::size_t j = 0; j < keys; ++j) dscores.at(k, j) += self.grad.at(anchors[k], j);
            for (std::size_t i = 0; i < unsampled.size(); ++i) {
                const Neighbourhood& hood = hoods[i];
                const std::size_t u = unsampled[i];
                if (hood.fallback) {
                    for (std::size_t k = 0; k < ns; ++k)
                        for (std::size_t j = 0; j < keys; ++j)
                            dscores.at(k, j) += self.grad.at(u, j) / static_cast<double>(ns);
                    continue;
                }
                const double r = static_cast<double>(u / width), c = static_cast<double>(u % width);
                const double coef = hood.factor / hood.weight_sum;
                for (std::size_t m = 0; m < hood.members.size(); ++m) {
                    const std::size_t k = hood.members[m];
                    const double w = hood.weights[m];
                    double dw = 0.0;
                    for (std::size_t j = 0; j < keys; ++j) {
                        const double g = self.grad.at(u, j);
                        dscores.at(k, j) += coef * w * g;
                        // d out / d w_k = factor * (s_k - mean) / W
                        dw += g * (s.at(k, j) * hood.factor - self.value.at(u, j)) / hood.weight_sum;
                    }
                    const double d = hood.distances[m];
                    if (d > 0.0 && pp.requires_grad) {
                        const double dd = -w * w * dw;
                        dpos.at(k, 0) += dd * (pp.value.at(k, 0) - r) / d;
                        dpos.at(k, 1) += dd * (pp.value.at(k, 1) - c) / d;
                    }
                }
            }
            if (ps.requires_grad) ps.accumulate(dscores);
            if (pp.requires_grad) pp.accumulate(dpos);
        });
}

Tensor complete_attention(const Tensor& sampled_scores, const Tensor& positions, const CompletionLayout& layout,
                          CompletionStats* stats) {
    return complete_attention(ad::constant(sampled_scores), ad::constant(positions), layout, stats)->value;
}

namespace {

ad::Var row_max(const ad::Var& a) {
    const Tensor& x = a->value;
    const std::size_t rows = x.rows(), cols = x.cols();
    std::vector<std::size_t> arg(rows, 0);
    Tensor out({rows});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 1; c < cols; ++c)
            if (x.at(r, c) > x.at(r, arg[r])) arg[r] = c;
        out[r] = x.at(r, arg[r]);
    }
    return ad::make_node("row_max", std::move(out), {a}, [arg, cols](ad::Node& self) {
        ad::Node& p = *self.parents[0];
        Tensor g(p.shape());
        for (std::size_t r = 0; r < arg.size(); ++r) g[r * cols + arg[r]] = self.grad[r];
        p.accumulate(g);
    });
}

}  // namespace

ad::Var guidance_from_attention(const std::vector<ad::Var>& per_head, KeyReduction keys) {
    if (per_head.empty()) fail(ErrorKind::Shape, "guidance extraction needs at least one head");
    const std::size_t rows = per_head.front()->value.rows();
    ad::Var total;
    for (const auto& head : per_head) {
        if (head->value.rows() != rows) fail(ErrorKind::Shape, "attention heads disagree in shape");
        ad::Var reduced = keys == KeyReduction::Mean
                              ? ad::scale(ad::reshape(ad::matmul(head, ad::constant(Tensor({head->value.cols(), 1}, 1.0))), {rows}),
                                          1.0 / static_cast<double>(head->value.cols()))
                              : row_max(head);
        total = total ? ad::add(total, reduced) : reduced;
    }
    return ad::divide_by_max(ad::scale(total, 1.0 / static_cast<double>(per_head.size())));
}

GuidanceMap extract_guidance_map(const std::vector<Tensor>& per_head, std::size_t height, std::size_t width,
                                 KeyReduction keys) {
    std::vector<ad::Var> heads;
    for (const auto& t : per_head) {
        if (t.rank() != 2 || t.rows() != height * width) {
            fail(ErrorKind::Shape, "attention " + shape_to_string(t.shape()) + " does not match a " +
                                       std::to_string(height) + "x" + std::to_string(width) + " grid");
        }
        heads.push_back(ad::constant(t));
    }
    GuidanceMap g;
    g.height = height;
    g.width = width;
    g.values = guidance_from_attention(heads, keys)->value.reshaped({height, width});
    return g;
}

}  // namespace stldm
