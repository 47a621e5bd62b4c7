#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "fusion/dfa.hpp"
#include "tensor/tensor.hpp"

namespace stldm {

// Normalised [0, 1] image coordinates, origin top-left, y downwards.
struct BBox {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    double cx() const { return x + w / 2.0; }
    double cy() const { return y + h / 2.0; }
    double area() const { return w * h; }
    bool valid() const;
    friend bool operator==(const BBox&, const BBox&) = default;
};

void require_valid(const BBox& b, const std::string& what);

double iou(const BBox& a, const BBox& b);
double dist_score(const BBox& a, const BBox& b);   // 100 * max(0, 1 - d / sqrt 2)
double size_score(const BBox& a, const BBox& b);   // 100 * min area / max area

// Cells of an h x w grid whose centre lies in the box; the cell under the
// box centre is always set so tiny boxes still leave a mark. Flat [h*w].
Tensor rasterize_box(const BBox& box, std::size_t height, std::size_t width);

// Threshold at beta_frac * max and take the bounding rectangle of the active cells.
BBox predicted_box_from_guidance(const GuidanceMap& g, double beta_frac = 0.5);

struct GroundTruth {
    BBox box;
    std::optional<BBox> alternative;  // second legal placement ("beside")
};

struct EvalRow {
    double iou = 0.0;
    double size_score = 0.0;
    double dist_score = 0.0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    double mean_iou = 0.0;
    double mean_size = 0.0;
    double mean_dist = 0.0;
};

// Metrics per scene against the placement with the better dist score.
EvalRow evaluate_one(const GroundTruth& truth, const BBox& prediction);
EvalReport evaluate_batch(const std::vector<GroundTruth>& truths, const std::vector<BBox>& predictions);

}  // namespace stldm
