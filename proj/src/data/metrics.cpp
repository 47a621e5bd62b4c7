#include "data/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "common/error.hpp"

namespace stldm {

namespace {
constexpr double kSlack = 1e-9;  // manifest boxes are rounded to 6 decimals
}

bool BBox::valid() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(w) && std::isfinite(h) && x >= -kSlack &&
           y >= -kSlack && w > 0.0 && h > 0.0 && x + w <= 1.0 + kSlack && y + h <= 1.0 + kSlack;
}

void require_valid(const BBox& b, const std::string& what) {
    if (!b.valid()) {
        fail(ErrorKind::Data, what + ": invalid box (" + std::to_string(b.x) + ", " + std::to_string(b.y) + ", " +
                                  std::to_string(b.w) + ", " + std::to_string(b.h) + ")");
    }
}

double iou(const BBox& a, const BBox& b) {
    const double iw = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
    const double ih = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

double dist_score(const BBox& a, const BBox& b) {
    const double d = std::hypot(a.cx() - b.cx(), a.cy() - b.cy());
    return 100.0 * std::max(0.0, 1.0 - d / std::sqrt(2.0));
}

double size_score(const BBox& a, const BBox& b) {
    const double lo = std::min(a.area(), b.area()), hi = std::max(a.area(), b.area());
    return hi > 0.0 ? 100.0 * lo / hi : 0.0;
}

Tensor rasterize_box(const BBox& box, std::size_t height, std::size_t width) {
    Tensor mask({height * width});
    for (std::size_t r = 0; r < height; ++r)
        for (std::size_t c = 0; c < width; ++c) {
            const double y = (static_cast<double>(r) + 0.5) / static_cast<double>(height);
            const double x = (static_cast<double>(c) + 0.5) / static_cast<double>(width);
            if (y >= box.y && y <= box.y + box.h && x >= box.x && x <= box.x + box.w) mask[r * width + c] = 1.0;
        }
    const auto clampi = [](double v, std::size_t n) {
        return std::min(n - 1, static_cast<std::size_t>(std::max(0.0, std::floor(v * static_cast<double>(n)))));
    };
    mask[clampi(box.cy(), height) * width + clampi(box.cx(), width)] = 1.0;
    return mask;
}

BBox predicted_box_from_guidance(const GuidanceMap& g, double beta_frac) {
    const std::size_t h = g.height, w = g.width;
    if (g.values.size() != h * w || g.values.empty()) fail(ErrorKind::Shape, "malformed guidance map");
    const double beta = beta_frac * max_value(g.values);
    std::size_t r0 = h, r1 = 0, c0 = w, c1 = 0;
    bool any = false;
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            if (!(g.values[r * w + c] > beta)) continue;
            any = true;
            r0 = std::min(r0, r);
            r1 = std::max(r1, r);
            c0 = std::min(c0, c);
            c1 = std::max(c1, c);
        }
    if (!any) fail(ErrorKind::GuidanceEmpty, "no guidance cell above threshold " + std::to_string(beta));
    const double fh = static_cast<double>(h), fw = static_cast<double>(w);
    return BBox{static_cast<double>(c0) / fw, static_cast<double>(r0) / fh, static_cast<double>(c1 - c0 + 1) / fw,
                static_cast<double>(r1 - r0 + 1) / fh};
}

EvalRow evaluate_one(const GroundTruth& truth, const BBox& prediction) {
    require_valid(truth.box, "ground truth");
    require_valid(prediction, "prediction");
    const BBox* best = &truth.box;
    if (truth.alternative) {
        require_valid(*truth.alternative, "alternative ground truth");
        if (dist_score(*truth.alternative, prediction) > dist_score(truth.box, prediction)) best = &*truth.alternative;
    }
    return EvalRow{iou(*best, prediction), size_score(*best, prediction), dist_score(*best, prediction)};
}

EvalReport evaluate_batch(const std::vector<GroundTruth>& truths, const std::vector<BBox>& predictions) {
    if (truths.size() != predictions.size()) {
        fail(ErrorKind::Data, "evaluation needs one prediction per scene: " + std::to_string(truths.size()) +
                                  " scenes, " + std::to_string(predictions.size()) + " predictions");
    }
    EvalReport report;
    for (std::size_t i = 0; i < truths.size(); ++i) {
        report.rows.push_back(evaluate_one(truths[i], predictions[i]));
        report.mean_iou += report.rows.back().iou;
        report.mean_size += report.rows.back().size_score;
        report.mean_dist += report.rows.back().dist_score;
    }
    if (!truths.empty()) {
        const double n = static_cast<double>(truths.size());
        report.mean_iou /= n;
        report.mean_size /= n;
        report.mean_dist /= n;
    }
    return report;
}

}  // namespace stldm
