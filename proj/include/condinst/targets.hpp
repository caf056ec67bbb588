#pragma once
// Ground-truth assignment: which pyramid locations are responsible for which
// instances, their box-distance and center-ness regression targets, ranked
// sub-sampling of positive locations for the mask loss, and downsampling of
// ground-truth masks to the prediction resolution.

#include <cstddef>
#include <map>
#include <utility>
#include <vector>

#include "condinst/feature_map.hpp"
#include "condinst/model.hpp"
#include "condinst/synthdata.hpp"

namespace condinst {

struct TargetConfig {
    double center_radius = 1.5;      // half-extent of the center region, in strides
    int sample_cap = 64;             // mask-loss locations kept per image
    bool soft_mask_targets = false;  // keep block averages instead of thresholding
    // Upper bound on max(l,t,r,b) admitted at each configured level, ascending;
    // empty = twice the level stride, with the last level unbounded.
    std::vector<double> level_upper_bounds;
};

void validate(const TargetConfig& config, size_t num_levels);

/// The default regression ranges: level i admits max-distances up to twice its
/// stride, except the last level which is unbounded.
std::vector<double> default_level_bounds(const std::vector<int>& levels);

struct LocationTarget {
    int level = 0;
    int x = 0, y = 0;    // cell within the level grid
    int px = 0, py = 0;  // mapped input-image point
    int class_label = 0;           // 0 = background
    double l = -1, t = -1, r = -1, b = -1;  // distances to the tight box, >= 0 when positive
    double centerness = 0;
    int instance_index = -1;  // -1 = background

    bool positive() const { return class_label > 0; }
};

struct TargetSet {
    // Level-major, row-major within each level.
    std::vector<LocationTarget> locations;
    std::map<int, size_t> level_offset;                // level -> first index
    std::map<int, std::pair<int, int>> level_size;     // level -> (height, width)
    std::vector<std::vector<size_t>> per_instance;     // instance -> its positive locations
    std::vector<int> instances_without_positives;      // degenerate, flagged
    int n_pos = 0;

    size_t index_of(int level, int y, int x) const;
};

/// The mass-center region of a nonempty mask at one stride: (center ± r*stride)
/// clipped to the mask's tight pixel bounds and the image. Bounds are inclusive
/// pixel coordinates.
struct CenterRegion {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    bool contains(int px, int py) const { return x1 <= px && px <= x2 && y1 <= py && py <= y2; }
};
CenterRegion center_region(const BinaryMask& mask, int stride, double radius);

/// Center-ness per the geometric-mean-of-ratios rule; a pair that is entirely
/// zero degenerates to 0.
double centerness_target(double l, double t, double r, double b);

/// Labels every location of every configured level against the scene's full
/// (amodal) masks: positive iff the mapped point lies in an instance's center
/// region and the max box distance fits the level's range; contested points go
/// to the smaller mask. Occlusion does not shrink a detection target — only
/// the panoptic map resolves overlaps.
TargetSet assign_targets(const SceneAnnotation& scene, const ModelConfig& model_config,
                         const TargetConfig& target_config);

/// Keeps at most `cap` positive locations. Each instance ranks its own
/// positives by the predicted probability of its class; selection proceeds in
/// rounds where every instance offers its next-best location and the offers
/// are taken best-score-first, so no instance claims a second slot before all
/// others got one. Ties break on (level, y, x) order. `class_scores` holds,
/// per location index, the predicted probability of that location's
/// class_label (only positives are consulted). Returns ascending indices.
std::vector<size_t> sample_positives(const TargetSet& targets,
                                     const std::vector<double>& class_scores, int cap);

/// Block-average pooling of a 0/1 mask to a coarser grid, padding with zeros
/// when the size does not divide. Hard targets threshold the block average at
/// 0.5; soft targets keep it.
FeatureMap downsample_gt_mask(const BinaryMask& mask, int out_stride, bool soft = false);

}  // namespace condinst
