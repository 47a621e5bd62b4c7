#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "backbone/backbone.hpp"
#include "data/metrics.hpp"

namespace stldm {

enum class ShapeKind { Circle, Square, Triangle };
enum class Relation { LeftOf, RightOf, Above, Below, Beside, Between };

inline constexpr std::size_t kPaletteSize = 8;
inline constexpr std::size_t kShapeCount = 3;
inline constexpr std::size_t kRelationCount = 6;

const char* color_name(std::size_t color);
const char* shape_name(ShapeKind shape);
const char* relation_phrase(Relation relation);

struct SceneObject {
    ShapeKind shape = ShapeKind::Circle;
    std::size_t color = 0;
    BBox box;
};

struct Scene {
    Image image;
    std::vector<SceneObject> objects;
    SceneObject target;                  // shape/colour to generate; box == gt_box
    Relation relation = Relation::LeftOf;
    std::vector<std::size_t> anchors;    // indices into objects
    std::string caption;
    BBox gt_box;
    std::optional<BBox> alt_box;         // other legal side for "beside"

    GroundTruth truth() const { return GroundTruth{gt_box, alt_box}; }
};

// Deterministic in (seed, side, n_objects). Throws Placement after 100 failed tries.
Scene generate_scene(std::uint64_t seed, std::size_t side, std::size_t n_objects);

// Geometric predicate of the relation for a candidate box.
bool satisfies_relation(Relation relation, const BBox& box, const std::vector<BBox>& anchors);

struct ManifestEntry {
    std::string image;    // path relative to the manifest's directory
    std::string caption;
    GroundTruth truth;
};

std::string format_box(const BBox& b);
BBox parse_box(const std::string& text);
std::string format_manifest(const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> parse_manifest(const std::string& text, const std::string& origin);

inline constexpr const char* kManifestName = "manifest.tsv";

}  // namespace stldm
