#include "condinst/targets.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace condinst {

void validate(const TargetConfig& config, size_t num_levels) {
    require(config.center_radius > 0.0, ErrorKind::usage, "center radius must be positive");
    require(config.sample_cap >= 1, ErrorKind::usage, "sample cap must be at least 1");
    if (!config.level_upper_bounds.empty()) {
        require(config.level_upper_bounds.size() == num_levels, ErrorKind::usage,
                "need one regression upper bound per pyramid level");
        for (size_t i = 1; i < config.level_upper_bounds.size(); ++i)
            require(config.level_upper_bounds[i] > config.level_upper_bounds[i - 1],
                    ErrorKind::usage, "regression upper bounds must be strictly increasing");
    }
}

std::vector<double> default_level_bounds(const std::vector<int>& levels) {
    std::vector<double> bounds;
    for (size_t i = 0; i < levels.size(); ++i)
        bounds.push_back(i + 1 == levels.size() ? std::numeric_limits<double>::infinity()
                                                : 2.0 * (1 << levels[i]));
    return bounds;
}

namespace {

// Inclusive pixel bounds of the foreground, plus its mass center.
struct MaskBounds {
    int min_x = 0, min_y = 0, max_x = 0, max_y = 0;
    double cx = 0, cy = 0;
    size_t area = 0;
};

MaskBounds mask_bounds(const BinaryMask& mask) {
    MaskBounds b;
    b.min_x = mask.width;
    b.min_y = mask.height;
    b.max_x = -1;
    b.max_y = -1;
    double sx = 0, sy = 0;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(y, x)) {
                b.min_x = std::min(b.min_x, x);
                b.min_y = std::min(b.min_y, y);
                b.max_x = std::max(b.max_x, x);
                b.max_y = std::max(b.max_y, y);
                sx += x;
                sy += y;
                ++b.area;
            }
    if (b.area > 0) {
        b.cx = sx / static_cast<double>(b.area);
        b.cy = sy / static_cast<double>(b.area);
    }
    return b;
}

}  // namespace

CenterRegion center_region(const BinaryMask& mask, int stride, double radius) {
    require(stride >= 1, ErrorKind::usage, "stride must be positive");
    require(radius > 0.0, ErrorKind::usage, "center radius must be positive");
    const MaskBounds b = mask_bounds(mask);
    require(b.area > 0, ErrorKind::usage, "center region of an empty mask is undefined");
    const double rs = radius * stride;
    CenterRegion region;
    region.x1 = std::max({b.cx - rs, static_cast<double>(b.min_x), 0.0});
    region.y1 = std::max({b.cy - rs, static_cast<double>(b.min_y), 0.0});
    region.x2 = std::min({b.cx + rs, static_cast<double>(b.max_x),
                          static_cast<double>(mask.width - 1)});
    region.y2 = std::min({b.cy + rs, static_cast<double>(b.max_y),
                          static_cast<double>(mask.height - 1)});
    return region;
}

double centerness_target(double l, double t, double r, double b) {
    require(l >= 0 && t >= 0 && r >= 0 && b >= 0, ErrorKind::usage,
            "center-ness needs non-negative distances");
    const double lr = std::max(l, r) > 0 ? std::min(l, r) / std::max(l, r) : 0.0;
    const double tb = std::max(t, b) > 0 ? std::min(t, b) / std::max(t, b) : 0.0;
    return std::sqrt(lr * tb);
}

size_t TargetSet::index_of(int level, int y, int x) const {
    const auto size_it = level_size.find(level);
    require(size_it != level_size.end(), ErrorKind::usage,
            "no such pyramid level: " + std::to_string(level));
    const auto [h, w] = size_it->second;
    require(y >= 0 && y < h && x >= 0 && x < w, ErrorKind::usage, "cell outside the level grid");
    return level_offset.at(level) + static_cast<size_t>(y) * w + x;
}

TargetSet assign_targets(const SceneAnnotation& scene, const ModelConfig& model_config,
                         const TargetConfig& target_config) {
    validate(model_config);
    validate(target_config, model_config.fpn_levels.size());
    const int height = scene.height();
    const int width = scene.width();
    require(height > 0 && width > 0, ErrorKind::usage, "scene has no pixels");

    std::vector<double> bounds = target_config.level_upper_bounds.empty()
                                     ? default_level_bounds(model_config.fpn_levels)
                                     : target_config.level_upper_bounds;

    // Per-instance geometry, computed once from the full (amodal) masks:
    // an occluded instance still owns its whole extent as a detection
    // target, only the panoptic map resolves overlaps to a single owner.
    const size_t n_inst = scene.instances.size();
    std::vector<CenterRegion> regions(n_inst);
    std::vector<MaskBounds> bbs(n_inst);
    std::vector<bool> usable(n_inst, false);
    for (size_t i = 0; i < n_inst; ++i) {
        bbs[i] = mask_bounds(scene.instances[i].full_mask);
        usable[i] = bbs[i].area > 0;
    }

    TargetSet out;
    out.per_instance.resize(n_inst);

    for (size_t lvl = 0; lvl < model_config.fpn_levels.size(); ++lvl) {
        const int level = model_config.fpn_levels[lvl];
        const int stride = model_config.stride_of_level(level);
        require(height % stride == 0 && width % stride == 0, ErrorKind::usage,
                "scene size is not divisible by the level strides");
        const int gh = height / stride;
        const int gw = width / stride;
        out.level_offset[level] = out.locations.size();
        out.level_size[level] = {gh, gw};

        // Center regions scale with the stride, so refresh them per level.
        for (size_t i = 0; i < n_inst; ++i)
            if (usable[i])
                regions[i] = center_region(scene.instances[i].full_mask, stride,
                                           target_config.center_radius);

        const double lower = lvl == 0 ? -1.0 : bounds[lvl - 1];
        const double upper = bounds[lvl];
        for (int y = 0; y < gh; ++y)
            for (int x = 0; x < gw; ++x) {
                LocationTarget loc;
                loc.level = level;
                loc.x = x;
                loc.y = y;
                loc.px = map_cell_to_input(x, stride);
                loc.py = map_cell_to_input(y, stride);

                int best = -1;
                size_t best_area = 0;
                for (size_t i = 0; i < n_inst; ++i) {
                    if (!usable[i] || !regions[i].contains(loc.px, loc.py)) continue;
                    const double m =
                        std::max({static_cast<double>(loc.px - bbs[i].min_x),
                                  static_cast<double>(loc.py - bbs[i].min_y),
                                  static_cast<double>(bbs[i].max_x - loc.px),
                                  static_cast<double>(bbs[i].max_y - loc.py)});
                    if (m <= lower || m > upper) continue;
                    if (best < 0 || bbs[i].area < best_area) {
                        best = static_cast<int>(i);
                        best_area = bbs[i].area;
                    }
                }
                if (best >= 0) {
                    const MaskBounds& bb = bbs[best];
                    loc.class_label = scene.instances[best].shape.class_id;
                    loc.instance_index = best;
                    loc.l = loc.px - bb.min_x;
                    loc.t = loc.py - bb.min_y;
                    loc.r = bb.max_x - loc.px;
                    loc.b = bb.max_y - loc.py;
                    loc.centerness = centerness_target(loc.l, loc.t, loc.r, loc.b);
                    out.per_instance[best].push_back(out.locations.size());
                    ++out.n_pos;
                }
                out.locations.push_back(loc);
            }
    }

    for (size_t i = 0; i < n_inst; ++i)
        if (out.per_instance[i].empty()) out.instances_without_positives.push_back(static_cast<int>(i));
    return out;
}

std::vector<size_t> sample_positives(const TargetSet& targets,
                                     const std::vector<double>& class_scores, int cap) {
    require(cap >= 1, ErrorKind::usage, "sample cap must be at least 1");
    require(class_scores.size() == targets.locations.size(), ErrorKind::usage,
            "need one class score per location");

    // Each instance's positives, best score first; the location index breaks
    // ties (the location list is (level, y, x)-lexicographic already).
    auto by_score = [&](size_t a, size_t b) {
        if (class_scores[a] != class_scores[b]) return class_scores[a] > class_scores[b];
        return a < b;
    };
    std::vector<std::vector<size_t>> ranked(targets.per_instance.size());
    for (size_t i = 0; i < targets.per_instance.size(); ++i) {
        ranked[i] = targets.per_instance[i];
        std::sort(ranked[i].begin(), ranked[i].end(), by_score);
    }

    // Rounds: every instance offers its next-best unused location, the offers
    // are taken in score order, and nobody gets a second slot before everyone
    // with locations left got one.  Under the cap this keeps each instance's
    // best locations; over it, whole instances are dropped by score.
    std::vector<size_t> picked;
    std::vector<size_t> cursor(ranked.size(), 0);
    bool any = true;
    while (any && picked.size() < static_cast<size_t>(cap)) {
        any = false;
        std::vector<size_t> offers;
        for (size_t i = 0; i < ranked.size(); ++i)
            if (cursor[i] < ranked[i].size()) offers.push_back(ranked[i][cursor[i]++]);
        std::sort(offers.begin(), offers.end(), by_score);
        for (size_t loc : offers) {
            if (picked.size() >= static_cast<size_t>(cap)) break;
            picked.push_back(loc);
            any = true;
        }
    }
    std::sort(picked.begin(), picked.end());
    return picked;
}

FeatureMap downsample_gt_mask(const BinaryMask& mask, int out_stride, bool soft) {
    require(out_stride == 1 || out_stride == 2 || out_stride == 4 || out_stride == 8,
            ErrorKind::usage,
            "mask target stride must be 1, 2, 4 or 8, got " + std::to_string(out_stride));
    require(mask.height > 0 && mask.width > 0, ErrorKind::usage, "empty mask shape");
    const int oh = (mask.height + out_stride - 1) / out_stride;
    const int ow = (mask.width + out_stride - 1) / out_stride;
    FeatureMap out(1, oh, ow, out_stride);
    const double denom = static_cast<double>(out_stride) * out_stride;
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
            int sum = 0;
            for (int dy = 0; dy < out_stride; ++dy)
                for (int dx = 0; dx < out_stride; ++dx) {
                    const int y = oy * out_stride + dy;
                    const int x = ox * out_stride + dx;
                    if (y < mask.height && x < mask.width && mask.at(y, x)) ++sum;
                }
            const double avg = sum / denom;  // out-of-range pixels count as zero
            out.at(0, oy, ox) = soft ? avg : (avg >= 0.5 ? 1.0 : 0.0);
        }
    return out;
}

}  // namespace condinst
