#pragma once
// Deterministic synthetic scenes of overlapping shapes: analytic rasterization,
// scene composition with stuff background and z-ordered thing instances, and a
// documented on-disk dataset format with byte-exact round trips.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "condinst/feature_map.hpp"

namespace condinst {

enum class ShapeKind { ellipse, rectangle, triangle };

const char* shape_kind_name(ShapeKind kind);
ShapeKind shape_kind_from_name(const std::string& name);
// Classes are tied 1:1 to shape kinds (cycling when there are more than three
// classes) so class identity is visually groundable at toy scale.
ShapeKind shape_kind_for_class(int class_id);

struct ShapeInstance {
    int class_id = 1;  // 1..C
    ShapeKind kind = ShapeKind::ellipse;
    double cx = 0, cy = 0;        // center, image pixel coordinates
    double rx = 0, ry = 0;        // radii (half extents)
    double rotation = 0;          // radians, applied about the center
    int z_order = 0;              // higher draws in front
    std::array<double, 3> fill{};  // per-channel intensity in [0,1]
};

struct InstanceAnnotation {
    ShapeInstance shape;
    BinaryMask full_mask;     // amodal: the whole analytic shape
    BinaryMask visible_mask;  // full mask minus pixels claimed by higher z-order
    Box tight_box;            // tight bounds of the full mask, exclusive upper edge
};

struct SceneAnnotation {
    FeatureMap image;  // 3 channels, stride 1, values on the 8-bit grid (k/255)
    std::vector<InstanceAnnotation> instances;
    std::vector<uint16_t> panoptic;    // row-major ids: 1..S stuff, S+1+i instance i
    std::vector<uint8_t> stuff_label;  // stuff class per pixel (1..S), under things too
    std::vector<std::array<int, 2>> pair_indices;  // identical-appearance instance pairs
    int num_stuff = 0;
    int placement_failures = 0;

    int height() const { return image.height; }
    int width() const { return image.width; }
    int instance_panoptic_id(int index) const { return num_stuff + 1 + index; }
};

struct DatasetConfig {
    int num_scenes = 100;
    int image_size = 64;  // square, must be divisible by 32
    int min_instances = 1;
    int max_instances = 5;
    int num_thing_classes = 3;
    int num_stuff_classes = 2;
    double occlusion_prob = 0.5;       // chance a new shape is anchored onto an existing one
    double identical_pair_prob = 0.25;  // chance a scene contains an identical-looking pair
    uint64_t rng_seed = 1;
};

void validate(const DatasetConfig& config);

/// A pixel is foreground iff its center (x+0.5, y+0.5) lies inside the analytic
/// shape (boundary inclusive). Zero-radius shapes yield an empty mask and set
/// *degenerate when provided.
BinaryMask rasterize(const ShapeInstance& shape, int image_size, bool* degenerate = nullptr);

/// Deterministic for (config.rng_seed, scene_index).
SceneAnnotation generate_scene(const DatasetConfig& config, int scene_index);

struct Dataset {
    DatasetConfig config;
    std::vector<SceneAnnotation> scenes;
};

void write_dataset(const DatasetConfig& config, const std::vector<SceneAnnotation>& scenes,
                   const std::string& directory);
Dataset read_dataset(const std::string& directory);

}  // namespace condinst
