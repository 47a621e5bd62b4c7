#include "data/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "common/error.hpp"

namespace stldm {

namespace {

constexpr std::uint8_t kPalette[kPaletteSize][3] = {
    {230, 40, 40},   {40, 190, 60},  {40, 70, 230},  {240, 220, 40},
    {40, 220, 220},  {220, 50, 200}, {250, 140, 30}, {250, 250, 250},
};
constexpr std::uint8_t kBackground = 128;
constexpr int kMaxTries = 100;
constexpr double kGap = 0.02;  // minimum clearance between drawn objects

bool separated(const BBox& a, const BBox& b, double gap) {
    return a.x + a.w + gap <= b.x || b.x + b.w + gap <= a.x || a.y + a.h + gap <= b.y || b.y + b.h + gap <= a.y;
}

bool overlaps_span(double a0, double a1, double b0, double b1) { return a0 < b1 && b0 < a1; }

// Box of A's size centred in the free band on one side of A, if it fits.
std::optional<BBox> side_box(const SceneObject& a, std::size_t self, const std::vector<SceneObject>& objects,
                             Relation side) {
    const BBox& A = a.box;
    const double w = A.w, h = A.h;
    double lo = 0.0, hi = 1.0;
    const bool horizontal = side == Relation::LeftOf || side == Relation::RightOf;
    if (side == Relation::LeftOf) hi = A.x;
    if (side == Relation::RightOf) lo = A.x + A.w;
    if (side == Relation::Above) hi = A.y;
    if (side == Relation::Below) lo = A.y + A.h;
    for (std::size_t i = 0; i < objects.size(); ++i) {
        if (i == self) continue;
        const BBox& o = objects[i].box;
        if (horizontal) {
            if (!overlaps_span(o.y, o.y + o.h, A.y, A.y + A.h)) continue;
            if (side == Relation::LeftOf && o.x + o.w <= A.x) lo = std::max(lo, o.x + o.w);
            if (side == Relation::RightOf && o.x >= A.x + A.w) hi = std::min(hi, o.x);
        } else {
            if (!overlaps_span(o.x, o.x + o.w, A.x, A.x + A.w)) continue;
            if (side == Relation::Above && o.y + o.h <= A.y) lo = std::max(lo, o.y + o.h);
            if (side == Relation::Below && o.y >= A.y + A.h) hi = std::min(hi, o.y);
        }
    }
    const double extent = horizontal ? w : h;
    if (hi - lo < extent) return std::nullopt;
    const double centre = (lo + hi) / 2.0;
    if (horizontal) return BBox{centre - w / 2.0, A.cy() - h / 2.0, w, h};
    return BBox{A.cx() - w / 2.0, centre - h / 2.0, w, h};
}

bool acceptable(const BBox& gt, const std::vector<SceneObject>& objects) {
    if (!gt.valid() || gt.x < 0.0 || gt.y < 0.0 || gt.x + gt.w > 1.0 || gt.y + gt.h > 1.0) return false;
    return std::all_of(objects.begin(), objects.end(), [&](const SceneObject& o) { return iou(gt, o.box) <= 0.1; });
}

bool inside_shape(ShapeKind shape, const BBox& b, double x, double y) {
    if (x < b.x || x > b.x + b.w || y < b.y || y > b.y + b.h) return false;
    switch (shape) {
        case ShapeKind::Square: return true;
        case ShapeKind::Circle: {
            const double dx = (x - b.cx()) / (b.w / 2.0), dy = (y - b.cy()) / (b.h / 2.0);
            return dx * dx + dy * dy <= 1.0;
        }
        case ShapeKind::Triangle: return std::abs(x - b.cx()) <= (y - b.y) / b.h * (b.w / 2.0);
    }
    return false;
}

Image render(std::size_t side, const std::vector<SceneObject>& objects) {
    Image image(side, side, static_cast<double>(kBackground) / 255.0);
    const double inv = 1.0 / static_cast<double>(side);
    for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < side; ++c) {
            const double y = (static_cast<double>(r) + 0.5) * inv, x = (static_cast<double>(c) + 0.5) * inv;
            for (const auto& o : objects) {
                if (!inside_shape(o.shape, o.box, x, y)) continue;
                for (std::size_t k = 0; k < 3; ++k)
                    image.pixels[(r * side + c) * 3 + k] = static_cast<double>(kPalette[o.color][k]) / 255.0;
            }
        }
    return image;
}

std::string describe(const SceneObject& o) { return std::string(color_name(o.color)) + " " + shape_name(o.shape); }

}  // namespace

const char* color_name(std::size_t color) {
    static const char* names[kPaletteSize] = {"red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white"};
    if (color >= kPaletteSize) fail(ErrorKind::Data, "colour index out of range");
    return names[color];
}

const char* shape_name(ShapeKind shape) {
    switch (shape) {
        case ShapeKind::Circle: return "circle";
        case ShapeKind::Square: return "square";
        case ShapeKind::Triangle: return "triangle";
    }
    return "?";
}

const char* relation_phrase(Relation relation) {
    switch (relation) {
        case Relation::LeftOf: return "left of";
        case Relation::RightOf: return "right of";
        case Relation::Above: return "above";
        case Relation::Below: return "below";
        case Relation::Beside: return "beside";
        case Relation::Between: return "between";
    }
    return "?";
}

bool satisfies_relation(Relation relation, const BBox& box, const std::vector<BBox>& anchors) {
    if (anchors.empty()) return false;
    const BBox& a = anchors.front();
    switch (relation) {
        case Relation::LeftOf: return box.cx() < a.cx();
        case Relation::RightOf: return box.cx() > a.cx();
        case Relation::Above: return box.cy() < a.cy();
        case Relation::Below: return box.cy() > a.cy();
        case Relation::Beside: return box.cx() != a.cx() && std::abs(box.cy() - a.cy()) < 1e-9;
        case Relation::Between: {
            if (anchors.size() < 2) return false;
            const BBox& b = anchors[1];
            return box.cx() >= std::min(a.cx(), b.cx()) && box.cx() <= std::max(a.cx(), b.cx()) &&
                   box.cy() >= std::min(a.cy(), b.cy()) && box.cy() <= std::max(a.cy(), b.cy());
        }
    }
    return false;
}

Scene generate_scene(std::uint64_t seed, std::size_t side, std::size_t n_objects) {
    if (n_objects == 0) fail(ErrorKind::Config, "a scene needs at least one object");
    if (n_objects >= kPaletteSize * kShapeCount) fail(ErrorKind::Config, "too many objects for distinct targets");
    if (side == 0) fail(ErrorKind::Config, "image side must be positive");
    Rng rng(seed);
    Scene scene;

    for (std::size_t i = 0; i < n_objects; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < kMaxTries && !placed; ++attempt) {
            const double s = rng.uniform(0.14, 0.22);
            BBox box{rng.uniform(0.0, 1.0 - s), rng.uniform(0.0, 1.0 - s), s, s};
            if (!std::all_of(scene.objects.begin(), scene.objects.end(),
                             [&](const SceneObject& o) { return separated(box, o.box, kGap); }))
                continue;
            SceneObject obj;
            obj.shape = static_cast<ShapeKind>(rng.below(kShapeCount));
            obj.color = rng.below(kPaletteSize);
            obj.box = box;
            scene.objects.push_back(obj);
            placed = true;
        }
        if (!placed) fail(ErrorKind::Placement, "could not place object " + std::to_string(i) + " without overlap");
    }

    // Target appearance must not already be in the scene.
    std::vector<std::pair<ShapeKind, std::size_t>> free_specs;
    for (std::size_t s = 0; s < kShapeCount; ++s)
        for (std::size_t c = 0; c < kPaletteSize; ++c) {
            const auto shape = static_cast<ShapeKind>(s);
            if (std::none_of(scene.objects.begin(), scene.objects.end(),
                             [&](const SceneObject& o) { return o.shape == shape && o.color == c; }))
                free_specs.emplace_back(shape, c);
        }
    const auto spec = free_specs[rng.below(free_specs.size())];
    scene.target.shape = spec.first;
    scene.target.color = spec.second;

    bool found = false;
    for (int attempt = 0; attempt < kMaxTries && !found; ++attempt) {
        auto relation = static_cast<Relation>(rng.below(kRelationCount));
        if (relation == Relation::Between && n_objects < 2) continue;
        const std::size_t a = rng.below(n_objects);
        std::optional<BBox> gt, alt;
        std::vector<std::size_t> anchors{a};
        if (relation == Relation::Between) {
            std::size_t b = rng.below(n_objects - 1);
            if (b >= a) ++b;
            anchors.push_back(b);
            const BBox& A = scene.objects[a].box;
            const BBox& B = scene.objects[b].box;
            const double cx = (A.cx() + B.cx()) / 2.0, cy = (A.cy() + B.cy()) / 2.0;
            gt = BBox{cx - A.w / 2.0, cy - A.h / 2.0, A.w, A.h};
        } else if (relation == Relation::Beside) {
            auto left = side_box(scene.objects[a], a, scene.objects, Relation::LeftOf);
            auto right = side_box(scene.objects[a], a, scene.objects, Relation::RightOf);
            if (left && !acceptable(*left, scene.objects)) left.reset();
            if (right && !acceptable(*right, scene.objects)) right.reset();
            if (left && right) {
                const bool pick_left = rng.below(2) == 0;
                gt = pick_left ? left : right;
                alt = pick_left ? right : left;
            } else {
                gt = left ? left : right;
            }
        } else {
            gt = side_box(scene.objects[a], a, scene.objects, relation);
        }
        if (!gt || !acceptable(*gt, scene.objects)) continue;
        std::vector<BBox> anchor_boxes;
        for (auto i : anchors) anchor_boxes.push_back(scene.objects[i].box);
        if (!satisfies_relation(relation, *gt, anchor_boxes)) continue;
        scene.relation = relation;
        scene.anchors = anchors;
        scene.gt_box = *gt;
        scene.alt_box = alt;
        found = true;
    }
    if (!found) fail(ErrorKind::Placement, "no legal target placement after " + std::to_string(kMaxTries) + " tries");

    scene.target.box = scene.gt_box;
    std::string spatial = std::string(relation_phrase(scene.relation)) + " " + describe(scene.objects[scene.anchors[0]]);
    if (scene.relation == Relation::Between) spatial += " and " + describe(scene.objects[scene.anchors[1]]);
    scene.caption = describe(scene.target) + " [" + spatial + "]";
    scene.image = render(side, scene.objects);
    return scene;
}

std::string format_box(const BBox& b) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f", b.x, b.y, b.w, b.h);
    return buf;
}

BBox parse_box(const std::string& text) {
    BBox b;
    char extra = 0;
    if (std::sscanf(text.c_str(), "%lf,%lf,%lf,%lf%c", &b.x, &b.y, &b.w, &b.h, &extra) != 4) {
        fail(ErrorKind::Data, "malformed box '" + text + "'");
    }
    require_valid(b, "box '" + text + "'");
    return b;
}

std::string format_manifest(const std::vector<ManifestEntry>& entries) {
    std::string out;
    for (const auto& e : entries) {
        out += e.image + "\t" + e.caption + "\t" + format_box(e.truth.box);
        if (e.truth.alternative) out += "\t" + format_box(*e.truth.alternative);
        out += "\n";
    }
    return out;
}

std::vector<ManifestEntry> parse_manifest(const std::string& text, const std::string& origin) {
    std::vector<ManifestEntry> entries;
    std::istringstream in(text);
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
            fields.push_back(line.substr(start, tab - start));
        fields.push_back(line.substr(start));
        if (fields.size() != 3 && fields.size() != 4) {
            fail(ErrorKind::Data, origin + ":" + std::to_string(number) + ": expected 3 or 4 tab-separated fields");
        }
        ManifestEntry e;
        e.image = fields[0];
        e.caption = fields[1];
        e.truth.box = parse_box(fields[2]);
        if (fields.size() == 4) e.truth.alternative = parse_box(fields[3]);
        entries.push_back(std::move(e));
    }
    return entries;
}

}  // namespace stldm
