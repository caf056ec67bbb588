// Tests for ground-truth assignment: mapped points, center regions and mass
// centers, center-ness values, the full labeler against an independent
// brute-force oracle on random scenes, ranked positive sampling, and mask
// downsampling against a block-average oracle.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "condinst/rng.hpp"
#include "condinst/synthdata.hpp"
#include "condinst/targets.hpp"

using namespace condinst;

namespace {

template <typename Fn>
ErrorKind thrown_kind(Fn&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an Error to be thrown");
    return ErrorKind::usage;
}

BinaryMask rect_mask(int size, int x0, int y0, int x1, int y1) {
    BinaryMask m(size, size);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) m.at(y, x) = 1;
    return m;
}

SceneAnnotation scene_with_masks(int size, const std::vector<BinaryMask>& masks,
                                 const std::vector<int>& classes) {
    SceneAnnotation scene;
    scene.image = FeatureMap(3, size, size, 1, 0.0);
    scene.num_stuff = 2;
    for (size_t i = 0; i < masks.size(); ++i) {
        InstanceAnnotation inst;
        inst.shape.class_id = classes[i];
        inst.visible_mask = masks[i];
        inst.full_mask = masks[i];
        scene.instances.push_back(std::move(inst));
    }
    return scene;
}

// Brute-force labeler written against the stated rules only: recompute every
// instance's mass center and clipped region from scratch, test every cell at
// every level, resolve contention by the smaller full-mask area.
struct OracleLoc {
    int cls = 0, inst = -1;
    double l = -1, t = -1, r = -1, b = -1;
};

std::vector<OracleLoc> oracle_labels(const SceneAnnotation& scene, const ModelConfig& mc,
                                     double radius, const std::vector<double>& uppers) {
    std::vector<OracleLoc> out;
    for (size_t li = 0; li < mc.fpn_levels.size(); ++li) {
        const int stride = 1 << mc.fpn_levels[li];
        const double lo = li == 0 ? -1.0 : uppers[li - 1];
        const double hi = uppers[li];
        for (int y = 0; y < scene.height() / stride; ++y)
            for (int x = 0; x < scene.width() / stride; ++x) {
                const int px = stride / 2 + x * stride;
                const int py = stride / 2 + y * stride;
                OracleLoc best;
                size_t best_area = std::numeric_limits<size_t>::max();
                for (size_t i = 0; i < scene.instances.size(); ++i) {
                    const BinaryMask& m = scene.instances[i].full_mask;
                    double sx = 0, sy = 0;
                    size_t area = 0;
                    int mnx = m.width, mny = m.height, mxx = -1, mxy = -1;
                    for (int yy = 0; yy < m.height; ++yy)
                        for (int xx = 0; xx < m.width; ++xx)
                            if (m.at(yy, xx)) {
                                sx += xx;
                                sy += yy;
                                ++area;
                                mnx = std::min(mnx, xx);
                                mny = std::min(mny, yy);
                                mxx = std::max(mxx, xx);
                                mxy = std::max(mxy, yy);
                            }
                    if (area == 0) continue;
                    const double cx = sx / area, cy = sy / area;
                    const double rx1 = std::max({cx - radius * stride, double(mnx), 0.0});
                    const double ry1 = std::max({cy - radius * stride, double(mny), 0.0});
                    const double rx2 =
                        std::min({cx + radius * stride, double(mxx), double(m.width - 1)});
                    const double ry2 =
                        std::min({cy + radius * stride, double(mxy), double(m.height - 1)});
                    if (px < rx1 || px > rx2 || py < ry1 || py > ry2) continue;
                    const double dl = px - mnx, dt = py - mny, dr = mxx - px, db = mxy - py;
                    const double mx = std::max({dl, dt, dr, db});
                    if (mx <= lo || mx > hi) continue;
                    if (area < best_area) {
                        best_area = area;
                        best = {scene.instances[i].shape.class_id, static_cast<int>(i),
                                dl, dt, dr, db};
                    }
                }
                out.push_back(best);
            }
    }
    return out;
}

}  // namespace

TEST_CASE("mapped points follow the half-stride offset formula") {
    CHECK(map_cell_to_input(0, 8) == 4);
    CHECK(map_cell_to_input(1, 8) == 12);
    CHECK(map_cell_to_input(2, 8) == 20);
    CHECK(map_cell_to_input(3, 16) == 56);
}

TEST_CASE("a symmetric square mask centers its region at the geometric center") {
    const BinaryMask m = rect_mask(16, 2, 2, 5, 5);
    // Tiny radius: the region collapses onto the mass center, exposing it.
    const CenterRegion r = center_region(m, 8, 1e-4);
    CHECK((r.x1 + r.x2) / 2 == doctest::Approx(3.5));
    CHECK((r.y1 + r.y2) / 2 == doctest::Approx(3.5));
}

TEST_CASE("an unclipped region spans center plus and minus radius times stride") {
    // Full-frame mask: tight box and image bounds never bind in the interior.
    const BinaryMask m = rect_mask(64, 0, 0, 63, 63);
    const CenterRegion r = center_region(m, 8, 1.5);
    CHECK(r.x1 == doctest::Approx(31.5 - 12.0));
    CHECK(r.x2 == doctest::Approx(31.5 + 12.0));
    CHECK(r.y1 == doctest::Approx(31.5 - 12.0));
    CHECK(r.y2 == doctest::Approx(31.5 + 12.0));
}

TEST_CASE("a one-pixel mask clips its region to that pixel") {
    BinaryMask m(64, 64);
    m.at(10, 10) = 1;
    // Before clipping the box would be (10 +- 12)^2; the tight box wins.
    const CenterRegion r = center_region(m, 8, 1.5);
    CHECK(r.x1 == 10.0);
    CHECK(r.x2 == 10.0);
    CHECK(r.y1 == 10.0);
    CHECK(r.y2 == 10.0);
    CHECK(r.contains(10, 10));
    CHECK_FALSE(r.contains(11, 10));
}

TEST_CASE("an L-shaped mask puts its mass center at the brute-force pixel mean") {
    BinaryMask m(32, 32);
    double sx = 0, sy = 0;
    int n = 0;
    auto set = [&](int y, int x) {
        m.at(y, x) = 1;
        sx += x;
        sy += y;
        ++n;
    };
    for (int y = 4; y <= 20; ++y) set(y, 4);
    for (int x = 5; x <= 12; ++x) set(20, x);
    const CenterRegion r = center_region(m, 4, 1e-5);
    CHECK((r.x1 + r.x2) / 2 == doctest::Approx(sx / n));
    CHECK((r.y1 + r.y2) / 2 == doctest::Approx(sy / n));
}

TEST_CASE("center region rejects an empty mask") {
    CHECK(thrown_kind([] { center_region(BinaryMask(8, 8), 8, 1.5); }) == ErrorKind::usage);
}

TEST_CASE("center-ness follows the geometric mean of the side ratios") {
    CHECK(centerness_target(5, 5, 5, 5) == 1.0);
    CHECK(centerness_target(2, 7, 2, 7) == 1.0);
    CHECK(centerness_target(1, 1, 3, 3) == doctest::Approx(1.0 / 3.0));
    CHECK(centerness_target(0, 2, 5, 2) == 0.0);
    CHECK(centerness_target(0, 5, 0, 2) == 0.0);  // degenerate both-zero pair
    CHECK(thrown_kind([] { centerness_target(-1, 1, 1, 1); }) == ErrorKind::usage);

    Rng rng(3);
    for (int i = 0; i < 500; ++i) {
        const double l = rng.uniform(0, 30), t = rng.uniform(0, 30);
        const double r = rng.uniform(0, 30), b = rng.uniform(0, 30);
        const double v = centerness_target(l, t, r, b);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(v == centerness_target(r, t, l, b));  // swap left-right
        CHECK(v == centerness_target(l, b, r, t));  // swap top-bottom
        if (l == r && t == b && l + r > 0 && t + b > 0) CHECK(v == 1.0);
    }
}

TEST_CASE("a centered 32x32 square lands on the middle level with four positives") {
    const SceneAnnotation scene =
        scene_with_masks(64, {rect_mask(64, 16, 16, 47, 47)}, {2});
    const TargetSet ts = assign_targets(scene, ModelConfig{}, TargetConfig{});

    CHECK(ts.n_pos == 4);
    CHECK(ts.per_instance[0].size() == 4);
    CHECK(ts.instances_without_positives.empty());
    for (const auto& [y, x] : std::vector<std::pair<int, int>>{{1, 1}, {1, 2}, {2, 1}, {2, 2}}) {
        const LocationTarget& loc = ts.locations[ts.index_of(4, y, x)];
        CHECK(loc.positive());
        CHECK(loc.class_label == 2);
        CHECK(loc.instance_index == 0);
    }
    // Distances at the (1,1) cell of the stride-16 level, mapped to (24,24).
    const LocationTarget& loc = ts.locations[ts.index_of(4, 1, 1)];
    CHECK(loc.l == 8.0);
    CHECK(loc.t == 8.0);
    CHECK(loc.r == 23.0);
    CHECK(loc.b == 23.0);
    CHECK(loc.centerness == doctest::Approx(std::sqrt((8.0 / 23.0) * (8.0 / 23.0))));
}

TEST_CASE("an instance too small to catch any mapped point is flagged") {
    BinaryMask tiny(64, 64);
    tiny.at(3, 3) = 1;
    const SceneAnnotation scene =
        scene_with_masks(64, {tiny, rect_mask(64, 16, 16, 47, 47)}, {1, 2});
    const TargetSet ts = assign_targets(scene, ModelConfig{}, TargetConfig{});
    CHECK(ts.per_instance[0].empty());
    CHECK(ts.instances_without_positives == std::vector<int>{0});
    CHECK(ts.n_pos == 4);  // the square's positives are untouched
}

TEST_CASE("the labeler matches a brute-force oracle on 200 random scenes") {
    DatasetConfig dc;
    dc.image_size = 64;
    dc.max_instances = 5;
    dc.rng_seed = 77;
    const ModelConfig mc;
    const TargetConfig tc;
    const std::vector<double> uppers = default_level_bounds(mc.fpn_levels);

    int scenes_with_positives = 0;
    for (int k = 0; k < 200; ++k) {
        const SceneAnnotation scene = generate_scene(dc, k);
        const TargetSet ts = assign_targets(scene, mc, tc);
        const std::vector<OracleLoc> want = oracle_labels(scene, mc, tc.center_radius, uppers);
        REQUIRE(ts.locations.size() == want.size());

        int n_pos = 0;
        for (size_t i = 0; i < want.size(); ++i) {
            const LocationTarget& got = ts.locations[i];
            REQUIRE(got.class_label == want[i].cls);
            REQUIRE(got.instance_index == want[i].inst);
            if (want[i].inst >= 0) {
                ++n_pos;
                REQUIRE(got.l == want[i].l);
                REQUIRE(got.t == want[i].t);
                REQUIRE(got.r == want[i].r);
                REQUIRE(got.b == want[i].b);
                REQUIRE(got.centerness ==
                        centerness_target(want[i].l, want[i].t, want[i].r, want[i].b));
            }
        }
        REQUIRE(ts.n_pos == n_pos);
        if (n_pos > 0) ++scenes_with_positives;

        // Structural invariants: the flag triple, cross-indexing, and the
        // expanded-box property for every positive location.
        size_t listed = 0;
        for (size_t i = 0; i < ts.per_instance.size(); ++i) {
            listed += ts.per_instance[i].size();
            for (size_t idx : ts.per_instance[i])
                REQUIRE(ts.locations[idx].instance_index == static_cast<int>(i));
        }
        REQUIRE(listed == static_cast<size_t>(ts.n_pos));
        for (const LocationTarget& loc : ts.locations) {
            const bool pos = loc.class_label > 0;
            REQUIRE(pos == (loc.instance_index >= 0));
            REQUIRE(pos == (loc.l >= 0 && loc.t >= 0 && loc.r >= 0 && loc.b >= 0));
            if (!pos) continue;
            // In the clipped region means within r*s of the mass center
            // (clipping only shrinks) and inside the tight box.
            const BinaryMask& m = scene.instances[loc.instance_index].full_mask;
            double sx = 0, sy = 0;
            int n = 0;
            for (int yy = 0; yy < m.height; ++yy)
                for (int xx = 0; xx < m.width; ++xx)
                    if (m.at(yy, xx)) {
                        sx += xx;
                        sy += yy;
                        ++n;
                    }
            const double rs = tc.center_radius * (1 << loc.level);
            REQUIRE(std::abs(loc.px - sx / n) <= rs);
            REQUIRE(std::abs(loc.py - sy / n) <= rs);
            REQUIRE(loc.centerness >= 0.0);
            REQUIRE(loc.centerness <= 1.0);
        }
    }
    CHECK(scenes_with_positives > 150);  // the oracle saw real work
}

TEST_CASE("positive sets of instances are disjoint by construction") {
    const SceneAnnotation scene = scene_with_masks(
        64, {rect_mask(64, 2, 2, 25, 25), rect_mask(64, 36, 36, 61, 61)}, {1, 3});
    const TargetSet ts = assign_targets(scene, ModelConfig{}, TargetConfig{});
    std::vector<size_t> all;
    for (const auto& list : ts.per_instance) all.insert(all.end(), list.begin(), list.end());
    std::sort(all.begin(), all.end());
    CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());
    CHECK(ts.per_instance[0].size() > 0);
    CHECK(ts.per_instance[1].size() > 0);
}

TEST_CASE("sampling keeps everything when under the cap") {
    const SceneAnnotation scene =
        scene_with_masks(64, {rect_mask(64, 16, 16, 47, 47)}, {2});
    const TargetSet ts = assign_targets(scene, ModelConfig{}, TargetConfig{});
    REQUIRE(ts.n_pos == 4);
    const std::vector<double> scores(ts.locations.size(), 0.5);
    const std::vector<size_t> kept = sample_positives(ts, scores, 64);
    CHECK(kept.size() == 4);
    CHECK(kept == ts.per_instance[0]);
}

TEST_CASE("over the cap, whole instances are dropped by score") {
    // Synthetic target set: 70 instances with one positive location each.
    TargetSet ts;
    ts.level_offset[3] = 0;
    ts.level_size[3] = {1, 70};
    std::vector<double> scores(70, 0.0);
    Rng rng(9);
    for (int i = 0; i < 70; ++i) {
        LocationTarget loc;
        loc.level = 3;
        loc.x = i;
        loc.class_label = 1;
        loc.instance_index = i;
        loc.l = loc.t = loc.r = loc.b = 1;
        ts.locations.push_back(loc);
        ts.per_instance.push_back({static_cast<size_t>(i)});
        scores[i] = rng.uniform01();
        ++ts.n_pos;
    }
    const std::vector<size_t> kept = sample_positives(ts, scores, 64);
    REQUIRE(kept.size() == 64);
    // Sort oracle: the 64 highest-scoring locations survive.
    std::vector<size_t> order(70);
    for (size_t i = 0; i < 70; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] > scores[b]; });
    std::vector<size_t> want(order.begin(), order.begin() + 64);
    std::sort(want.begin(), want.end());
    CHECK(kept == want);
}

TEST_CASE("score ties break on location order, deterministically") {
    TargetSet ts;
    ts.level_offset[3] = 0;
    ts.level_size[3] = {1, 10};
    for (int i = 0; i < 10; ++i) {
        LocationTarget loc;
        loc.level = 3;
        loc.x = i;
        loc.class_label = 1;
        loc.instance_index = 0;
        loc.l = loc.t = loc.r = loc.b = 1;
        ts.locations.push_back(loc);
        ++ts.n_pos;
    }
    ts.per_instance.push_back({0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
    const std::vector<double> scores(10, 0.25);
    const std::vector<size_t> kept = sample_positives(ts, scores, 4);
    CHECK(kept == std::vector<size_t>{0, 1, 2, 3});
    CHECK(kept == sample_positives(ts, scores, 4));
}

TEST_CASE("each instance keeps a slot when instances fit the cap") {
    DatasetConfig dc;
    dc.rng_seed = 31;
    dc.max_instances = 5;
    Rng rng(13);
    for (int k = 0; k < 40; ++k) {
        const SceneAnnotation scene = generate_scene(dc, k);
        const TargetSet ts = assign_targets(scene, ModelConfig{}, TargetConfig{});
        std::vector<double> scores(ts.locations.size());
        for (double& s : scores) s = rng.uniform01();
        for (int cap : {1, 3, 8, 64}) {
            const std::vector<size_t> kept = sample_positives(ts, scores, cap);
            CHECK(kept.size() <= static_cast<size_t>(cap));
            CHECK(kept.size() == std::min<size_t>(cap, ts.n_pos));
            int with_pos = 0, with_slot = 0;
            for (const auto& list : ts.per_instance) {
                if (list.empty()) continue;
                ++with_pos;
                for (size_t idx : list)
                    if (std::binary_search(kept.begin(), kept.end(), idx)) {
                        ++with_slot;
                        break;
                    }
            }
            if (with_pos <= cap) CHECK(with_slot == with_pos);
        }
    }
}

TEST_CASE("mask downsampling saturates, zeroes and rounds a checkerboard up") {
    const BinaryMask ones = rect_mask(16, 0, 0, 15, 15);
    for (int s : {2, 4, 8}) {
        const FeatureMap d = downsample_gt_mask(ones, s);
        CHECK(d.height == 16 / s);
        for (double v : d.data) CHECK(v == 1.0);
    }
    const FeatureMap empty = downsample_gt_mask(BinaryMask(16, 16), 4);
    for (double v : empty.data) CHECK(v == 0.0);

    BinaryMask checker(8, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) checker.at(y, x) = (x + y) % 2;
    const FeatureMap hard = downsample_gt_mask(checker, 2);
    for (double v : hard.data) CHECK(v == 1.0);  // 0.5 rounds up under >= 0.5
    const FeatureMap soft = downsample_gt_mask(checker, 2, true);
    for (double v : soft.data) CHECK(v == 0.5);
}

TEST_CASE("non-divisible masks are padded with zeros before pooling") {
    BinaryMask m(5, 6);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 6; ++x) m.at(y, x) = 1;
    const FeatureMap d = downsample_gt_mask(m, 2, true);
    REQUIRE(d.height == 3);
    REQUIRE(d.width == 3);
    CHECK(d.at(0, 0, 0) == 1.0);
    CHECK(d.at(0, 2, 0) == 0.5);  // bottom row: half the block is padding
    const FeatureMap h = downsample_gt_mask(m, 2, false);
    CHECK(h.at(0, 2, 2) == 1.0);  // 0.5 average still crosses the threshold
}

TEST_CASE("block averages match an independent oracle on random masks") {
    Rng rng(21);
    for (int trial = 0; trial < 50; ++trial) {
        const int h = static_cast<int>(rng.uniform_int(1, 33));
        const int w = static_cast<int>(rng.uniform_int(1, 33));
        BinaryMask m(h, w);
        for (auto& v : m.data) v = rng.bernoulli(0.4) ? 1 : 0;
        for (int s : {2, 4, 8}) {
            const FeatureMap got = downsample_gt_mask(m, s, true);
            REQUIRE(got.height == (h + s - 1) / s);
            REQUIRE(got.width == (w + s - 1) / s);
            for (int oy = 0; oy < got.height; ++oy)
                for (int ox = 0; ox < got.width; ++ox) {
                    int sum = 0;
                    for (int y = oy * s; y < std::min((oy + 1) * s, h); ++y)
                        for (int x = ox * s; x < std::min((ox + 1) * s, w); ++x)
                            sum += m.at(y, x);
                    REQUIRE(got.at(0, oy, ox) == static_cast<double>(sum) / (s * s));
                    const FeatureMap hardd = downsample_gt_mask(m, s, false);
                    REQUIRE(hardd.at(0, oy, ox) ==
                            (static_cast<double>(sum) / (s * s) >= 0.5 ? 1.0 : 0.0));
                }
        }
    }
    CHECK(thrown_kind([] { downsample_gt_mask(BinaryMask(8, 8), 3); }) == ErrorKind::usage);
}
