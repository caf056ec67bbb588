// Tests for the network: dynamic-filter accounting (closed form against an
// explicitly constructed head), unpacking layout, coordinate maps, pyramid and
// head shapes, head sharing across levels, translation behaviour of the
// dynamic head, end-to-end gradients through the controller, and checkpoints.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "condinst/gradcheck.hpp"
#include "condinst/json_util.hpp"
#include "condinst/model.hpp"
#include "condinst/ops.hpp"
#include "condinst/rng.hpp"

using namespace condinst;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    return dir;
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.head_channels = 4;
    c.mask_head_depth = 2;
    c.mask_head_width = 2;
    c.c_bottom = 2;
    c.num_classes = 2;
    c.num_stuff_classes = 1;
    return c;
}

FeatureMap random_map(int c, int h, int w, uint64_t seed, int stride = 1) {
    FeatureMap m(c, h, w, stride);
    Rng rng(seed);
    for (double& v : m.data) v = rng.uniform(-1.0, 1.0);
    return m;
}

// Independent parameter count: walk the channel sizes layer by layer.
int count_by_construction(int c_bottom, int depth, int width) {
    std::vector<int> dims{c_bottom + 2};
    for (int i = 0; i < depth - 1; ++i) dims.push_back(width);
    dims.push_back(1);
    int n = 0;
    for (size_t i = 0; i + 1 < dims.size(); ++i) n += dims[i] * dims[i + 1] + dims[i + 1];
    return n;
}

ConvSpec spec_from_store(const ParamStore& store, const std::string& name, int in_c, int out_c,
                         int k) {
    const ParamStore::Segment* w = store.find(name + ".weight");
    const ParamStore::Segment* b = store.find(name + ".bias");
    REQUIRE(w != nullptr);
    REQUIRE(b != nullptr);
    ConvSpec s(in_c, out_c, k);
    REQUIRE(w->size == s.weights.size());
    REQUIRE(b->size == s.bias.size());
    std::copy(store.values() + w->offset, store.values() + w->offset + w->size,
              s.weights.begin());
    std::copy(store.values() + b->offset, store.values() + b->offset + b->size, s.bias.begin());
    return s;
}

Var dot_loss(Tape& tape, const Var& m, const std::vector<double>& coeffs) {
    REQUIRE(coeffs.size() == m->value.data.size());
    FeatureMap v(1, 1, 1);
    for (size_t i = 0; i < coeffs.size(); ++i) v.data[0] += coeffs[i] * m->value.data[i];
    Node* mp = m.get();
    return tape.custom(std::move(v), {m}, [mp, coeffs](const FeatureMap& g) {
        for (size_t i = 0; i < coeffs.size(); ++i) mp->grad.data[i] += g.data[0] * coeffs[i];
    });
}

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

}  // namespace

TEST_CASE("filter parameter count matches an explicitly constructed head") {
    for (int d : {1, 2, 3, 4}) {
        for (int w : {2, 4, 8, 16}) {
            for (int c : {1, 2, 4, 8, 16}) {
                ModelConfig cfg;
                cfg.mask_head_depth = d;
                cfg.mask_head_width = w;
                cfg.c_bottom = c;
                const int expected = count_by_construction(c, d, w);
                CHECK(num_filter_params(cfg) == expected);
                CHECK(theta_layout(cfg).total == static_cast<size_t>(expected));
                MaskHead head = unpack_filter_params(std::vector<double>(expected, 0.0), cfg);
                CHECK(head.parameter_count() == static_cast<size_t>(expected));
                CHECK(head.layers.size() == static_cast<size_t>(d));
            }
        }
    }
}

TEST_CASE("filter parameter count hits the documented reference values") {
    ModelConfig cfg;  // depth 3, width 8, 8 bottom channels
    CHECK(num_filter_params(cfg) == 169);
    cfg.mask_head_depth = 2;
    CHECK(num_filter_params(cfg) == 97);
    cfg.mask_head_depth = 3;
    cfg.c_bottom = 1;
    CHECK(num_filter_params(cfg) == 113);
    cfg.c_bottom = 8;
    cfg.mask_head_depth = 1;
    CHECK(num_filter_params(cfg) == 11);
}

TEST_CASE("theta is sliced per layer: weights then biases, layer by layer") {
    ModelConfig cfg;
    const ThetaLayout lay = theta_layout(cfg);
    REQUIRE(lay.layers.size() == 3);
    CHECK(lay.layers[0].weight_offset == 0);
    CHECK(lay.layers[0].bias_offset == 80);
    CHECK(lay.layers[1].weight_offset == 88);
    CHECK(lay.layers[1].bias_offset == 152);
    CHECK(lay.layers[2].weight_offset == 160);
    CHECK(lay.layers[2].bias_offset == 168);
    CHECK(lay.total == 169);

    // Unpacking an iota vector lands each slice at the right place.
    std::vector<double> theta(169);
    for (size_t i = 0; i < theta.size(); ++i) theta[i] = static_cast<double>(i);
    MaskHead head = unpack_filter_params(theta, cfg);
    CHECK(head.layers[0].in_channels == 10);
    CHECK(head.layers[0].out_channels == 8);
    CHECK(head.layers[1].in_channels == 8);
    CHECK(head.layers[1].out_channels == 8);
    CHECK(head.layers[2].in_channels == 8);
    CHECK(head.layers[2].out_channels == 1);
    CHECK(head.layers[0].weights.front() == 0.0);
    CHECK(head.layers[0].bias.front() == 80.0);
    CHECK(head.layers[1].weights.front() == 88.0);
    CHECK(head.layers[1].bias.front() == 152.0);
    CHECK(head.layers[2].weights.front() == 160.0);
    CHECK(head.layers[2].bias.front() == 168.0);
}

TEST_CASE("unpacking rejects a wrong-length parameter vector by name and number") {
    ModelConfig cfg;
    try {
        unpack_filter_params(std::vector<double>(168, 0.0), cfg);
        FAIL("expected rejection");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::usage);
        CHECK(std::string(e.what()).find("168") != std::string::npos);
        CHECK(std::string(e.what()).find("169") != std::string::npos);
    }
}

TEST_CASE("applying a materialized head equals the plain convolution chain") {
    ModelConfig cfg;
    cfg.c_bottom = 3;
    cfg.mask_head_width = 4;
    const int n = num_filter_params(cfg);
    std::vector<double> theta(n);
    Rng rng(5);
    for (double& v : theta) v = rng.uniform(-0.5, 0.5);
    const FeatureMap in = random_map(cfg.c_bottom + 2, 6, 7, 9);
    const MaskHead head = unpack_filter_params(theta, cfg);
    const FeatureMap got = apply_mask_head(in, head);
    FeatureMap want = conv2d(in, head.layers[0]);
    want = conv2d(pointwise(want, Pointwise::relu), head.layers[1]);
    want = conv2d(pointwise(want, Pointwise::relu), head.layers[2]);
    CHECK(got.channels == 1);
    CHECK(got.data == want.data);
}

TEST_CASE("the fused mask stage equals the composed reference path") {
    Rng rng(31);
    MaskStageScratch scratch;  // deliberately shared across all configs below
    for (const CoordMode mode : {CoordMode::rel, CoordMode::abs, CoordMode::none}) {
        for (const int factor : {1, 2}) {
            for (const int depth : {1, 3}) {
                ModelConfig cfg;
                cfg.c_bottom = 3;
                cfg.mask_head_width = 4;
                cfg.mask_head_depth = depth;
                cfg.upsample_factor = factor;
                cfg.coord_mode = mode;
                FeatureMap bottom(cfg.c_bottom, 5, 6, cfg.bottom_stride());
                for (double& v : bottom.data) v = rng.normal(0.0, 1.0);
                std::vector<double> theta(num_filter_params(cfg));
                for (double& v : theta) v = rng.uniform(-0.8, 0.8);
                const int px = map_cell_to_input(2, cfg.bottom_stride());
                const int py = map_cell_to_input(3, cfg.bottom_stride());

                const FeatureMap coords =
                    make_relative_coords(px, py, bottom.height, bottom.width,
                                         cfg.bottom_stride(), mode, cfg.coord_norm_constant);
                FeatureMap augmented(cfg.c_bottom + 2, bottom.height, bottom.width,
                                     cfg.bottom_stride());
                std::copy(bottom.data.begin(), bottom.data.end(), augmented.data.begin());
                std::copy(coords.data.begin(), coords.data.end(),
                          augmented.data.begin() + bottom.data.size());
                FeatureMap want =
                    apply_mask_head(augmented, unpack_filter_params(theta, cfg));
                want = pointwise(want, Pointwise::sigmoid);
                if (factor > 1) want = bilinear_upsample(want, factor);

                const FeatureMap& got =
                    run_mask_stage(cfg, bottom, px, py, theta, scratch);
                REQUIRE(got.channels == 1);
                REQUIRE(got.height == want.height);
                REQUIRE(got.width == want.width);
                for (size_t i = 0; i < want.data.size(); ++i)
                    CHECK(std::abs(got.data[i] - want.data[i]) < 1e-12);
            }
        }
    }
}

TEST_CASE("cell centers map to input coordinates as floor(s/2) + cell*s") {
    CHECK(map_cell_to_input(0, 8) == 4);
    CHECK(map_cell_to_input(1, 8) == 12);
    CHECK(map_cell_to_input(2, 8) == 20);
    CHECK(map_cell_to_input(3, 16) == 56);
    CHECK(map_cell_to_input(0, 4) == 2);
}

TEST_CASE("relative coordinates vanish at the generator and ramp linearly") {
    const FeatureMap o = make_relative_coords(12, 20, 8, 8, 8, CoordMode::rel, 32.0);
    REQUIRE(o.channels == 2);
    CHECK(o.stride == 8);
    // The generator sits at cell (x=1, y=2): both channels are zero there.
    CHECK(o.at(0, 2, 1) == 0.0);
    CHECK(o.at(1, 2, 1) == 0.0);
    // Exact values against the direct formula.
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            CHECK(o.at(0, y, x) == ((4 + 8 * x) - 12) / 32.0);
            CHECK(o.at(1, y, x) == ((4 + 8 * y) - 20) / 32.0);
        }
    // Stepping one cell changes the matching channel by stride/norm.
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x + 1 < 8; ++x)
            CHECK(o.at(0, y, x + 1) - o.at(0, y, x) == doctest::Approx(8.0 / 32.0));
}

TEST_CASE("absolute and disabled coordinate modes") {
    const FeatureMap a = make_relative_coords(12, 20, 4, 4, 8, CoordMode::abs, 32.0);
    const FeatureMap b = make_relative_coords(999, -5, 4, 4, 8, CoordMode::abs, 32.0);
    CHECK(a.data == b.data);  // absolute maps ignore the generator
    CHECK(a.at(0, 0, 3) == (4 + 8 * 3) / 32.0);
    const FeatureMap z = make_relative_coords(12, 20, 4, 4, 8, CoordMode::none, 32.0);
    CHECK(z.channels == 2);
    for (double v : z.data) CHECK(v == 0.0);
}

TEST_CASE("coordinate mode names round-trip and bad names are rejected") {
    for (CoordMode m : {CoordMode::rel, CoordMode::abs, CoordMode::none})
        CHECK(coord_mode_from_name(coord_mode_name(m)) == m);
    CHECK(thrown_kind([] { coord_mode_from_name("cartesian"); }) == ErrorKind::usage);
}

TEST_CASE("config validation rejects malformed settings") {
    auto broken = [](auto&& mutate) {
        ModelConfig c;
        mutate(c);
        return thrown_kind([&] { validate(c); });
    };
    CHECK(broken([](ModelConfig& c) { c.fpn_levels = {}; }) == ErrorKind::usage);
    CHECK(broken([](ModelConfig& c) { c.fpn_levels = {3, 5}; }) == ErrorKind::usage);
    CHECK(broken([](ModelConfig& c) { c.fpn_levels = {5, 4, 3}; }) == ErrorKind::usage);
    CHECK(broken([](ModelConfig& c) { c.fpn_levels = {1, 2, 3}; }) == ErrorKind::usage);
    CHECK(broken([](ModelConfig& c) { c.fpn_levels = {6, 7, 8}; }) == ErrorKind::usage);
    CHECK(broken([](ModelConfig& c) { c.bottom_level = 4; }) == ErrorKind::usage);
    CHECK(broken([](ModelConfig& c) { c.upsample_factor = 3; }) == ErrorKind::usage);
    CHECK(broken([](ModelConfig& c) { c.mask_head_depth = 0; }) == ErrorKind::usage);
    CHECK(broken([](ModelConfig& c) { c.mask_head_width = 0; }) == ErrorKind::usage);
    CHECK(broken([](ModelConfig& c) { c.c_bottom = 0; }) == ErrorKind::usage);
    CHECK(broken([](ModelConfig& c) { c.coord_norm_constant = 0.0; }) == ErrorKind::usage);
}

TEST_CASE("model config survives a JSON round trip") {
    ModelConfig c = tiny_config();
    c.coord_mode = CoordMode::abs;
    c.static_mask_head = true;
    c.upsample_factor = 4;
    c.bottom_level = 2;
    const ModelConfig back = model_config_from_json(model_config_to_json(c));
    CHECK(back.fpn_levels == c.fpn_levels);
    CHECK(back.head_channels == c.head_channels);
    CHECK(back.mask_head_depth == c.mask_head_depth);
    CHECK(back.mask_head_width == c.mask_head_width);
    CHECK(back.c_bottom == c.c_bottom);
    CHECK(back.bottom_level == c.bottom_level);
    CHECK(back.upsample_factor == c.upsample_factor);
    CHECK(back.num_classes == c.num_classes);
    CHECK(back.num_stuff_classes == c.num_stuff_classes);
    CHECK(back.coord_norm_constant == c.coord_norm_constant);
    CHECK(back.coord_mode == c.coord_mode);
    CHECK(back.static_mask_head == c.static_mask_head);
}

TEST_CASE("forward produces the documented pyramid, head and branch shapes") {
    ModelConfig cfg;  // defaults: levels {3,4,5}, 3 classes, 2 stuff
    Model model(cfg, 11);
    Tape tape(false);
    const ModelOutputs out = model.forward(tape, random_map(3, 64, 64, 3));

    REQUIRE(out.pyramid.count(3) == 1);
    CHECK(out.pyramid.at(3)->value.height == 8);
    CHECK(out.pyramid.at(3)->value.width == 8);
    CHECK(out.pyramid.at(3)->value.stride == 8);
    CHECK(out.pyramid.at(4)->value.height == 4);
    CHECK(out.pyramid.at(4)->value.stride == 16);
    CHECK(out.pyramid.at(5)->value.height == 2);
    CHECK(out.pyramid.at(5)->value.stride == 32);

    for (int l : cfg.fpn_levels) {
        const HeadVars& h = out.heads.at(l);
        CHECK(h.cls->value.channels == 3);
        CHECK(h.box->value.channels == 4);
        CHECK(h.ctr->value.channels == 1);
        CHECK(h.controller->value.channels == 169);
        CHECK(h.cls->value.height == out.pyramid.at(l)->value.height);
    }
    CHECK(out.bottom->value.channels == 8);
    CHECK(out.bottom->value.height == 8);
    CHECK(out.bottom->value.stride == 8);
    CHECK(out.semantic->value.channels == 5);
    CHECK(out.semantic->value.height == 8);
    CHECK(out.bottom->value.all_finite());

    // A 32x32 image shrinks the top level to a single cell.
    Tape t2(false);
    const ModelOutputs small = model.forward(t2, random_map(3, 32, 32, 4));
    CHECK(small.pyramid.at(5)->value.height == 1);
    CHECK(small.pyramid.at(5)->value.width == 1);
}

TEST_CASE("a lower bottom level yields stride-4 bottom features") {
    ModelConfig cfg = tiny_config();
    cfg.bottom_level = 2;
    cfg.upsample_factor = 4;
    CHECK(cfg.bottom_stride() == 4);
    CHECK(cfg.mask_output_stride() == 1);
    Model model(cfg, 1);
    Tape tape(false);
    const ModelOutputs out = model.forward(tape, random_map(3, 64, 64, 5));
    CHECK(out.bottom->value.height == 16);
    CHECK(out.bottom->value.stride == 4);
    CHECK(out.semantic->value.height == 16);
}

TEST_CASE("levels 6 and 7 extend the pyramid when configured") {
    ModelConfig cfg = tiny_config();
    cfg.fpn_levels = {3, 4, 5, 6, 7};
    Model model(cfg, 2);
    Tape tape(false);
    const ModelOutputs out = model.forward(tape, random_map(3, 128, 128, 6));
    CHECK(out.pyramid.at(6)->value.height == 2);
    CHECK(out.pyramid.at(6)->value.stride == 64);
    CHECK(out.pyramid.at(7)->value.height == 1);
    CHECK(out.pyramid.at(7)->value.stride == 128);
    CHECK(out.heads.count(7) == 1);
}

TEST_CASE("images not divisible by the largest stride are rejected with a padding hint") {
    ModelConfig cfg = tiny_config();
    Model model(cfg, 3);
    Tape tape(false);
    try {
        model.forward(tape, random_map(3, 60, 64, 7));
        FAIL("expected rejection");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::usage);
        CHECK(std::string(e.what()).find("64x64") != std::string::npos);
    }
    CHECK(thrown_kind([&] {
              Tape t;
              model.forward(t, random_map(2, 64, 64, 8));
          }) == ErrorKind::usage);
}

TEST_CASE("head parameters are shared across pyramid levels") {
    ModelConfig cfg = tiny_config();
    Model model(cfg, 13);
    // One parameter set: no per-level head segments exist.
    int head_segments = 0;
    for (const auto& s : model.params().segments())
        if (s.name.rfind("head.", 0) == 0) ++head_segments;
    CHECK(head_segments == 2 * (2 + 2 + 4));  // two towers of two convs + four projections

    // Recomputing a head from the stored weights reproduces every level.
    Tape tape(false);
    const ModelOutputs out = model.forward(tape, random_map(3, 64, 64, 21));
    const ConvSpec t0 = spec_from_store(model.params(), "head.cls_tower0", 4, 4, 3);
    const ConvSpec t1 = spec_from_store(model.params(), "head.cls_tower1", 4, 4, 3);
    const ConvSpec cls = spec_from_store(model.params(), "head.cls", 4, 2, 3);
    for (int l : cfg.fpn_levels) {
        FeatureMap t = pointwise(conv2d(out.pyramid.at(l)->value, t0), Pointwise::relu);
        t = pointwise(conv2d(t, t1), Pointwise::relu);
        const FeatureMap want = conv2d(t, cls);
        CHECK(out.heads.at(l).cls->value.data == want.data);
    }
}

TEST_CASE("an all-zero image leaves only the configured biases") {
    ModelConfig cfg;
    Model model(cfg, 17);
    Tape tape(false);
    const ModelOutputs out = model.forward(tape, FeatureMap(3, 64, 64, 1, 0.0));
    const double prior = -std::log(99.0);
    for (double v : out.heads.at(3).cls->value.data) CHECK(v == doctest::Approx(prior));
    for (double v : out.heads.at(3).controller->value.data) CHECK(v == 0.0);
    for (double v : out.heads.at(4).box->value.data) CHECK(v == 0.0);
    for (double v : out.bottom->value.data) CHECK(v == 0.0);
    for (double v : out.semantic->value.data) CHECK(v == 0.0);
    // The starting foreground probability is about 1%.
    CHECK(1.0 / (1.0 + std::exp(-prior)) == doctest::Approx(0.01));
}

TEST_CASE("the taped mask head matches the plain unpack-and-apply path") {
    ModelConfig cfg = tiny_config();
    Model model(cfg, 19);
    const int n = num_filter_params(cfg);
    const FeatureMap bottom = random_map(cfg.c_bottom, 6, 6, 23, 8);
    const FeatureMap coords =
        make_relative_coords(20, 28, 6, 6, 8, CoordMode::rel, cfg.coord_norm_constant);
    Rng rng(29);
    for (int k = 0; k < 100; ++k) {
        std::vector<double> theta(n);
        for (double& v : theta) v = rng.uniform(-0.5, 0.5);
        FeatureMap theta_map(n, 1, 1);
        theta_map.data = theta;

        Tape tape(false);
        const Var got =
            model.apply_mask_head_on_tape(tape, tape.input(bottom), coords, tape.input(theta_map));

        FeatureMap augmented(cfg.c_bottom + 2, 6, 6, 8);
        for (int c = 0; c < cfg.c_bottom; ++c)
            std::copy(bottom.channel_ptr(c), bottom.channel_ptr(c) + 36, augmented.channel_ptr(c));
        std::copy(coords.channel_ptr(0), coords.channel_ptr(0) + 36,
                  augmented.channel_ptr(cfg.c_bottom));
        std::copy(coords.channel_ptr(1), coords.channel_ptr(1) + 36,
                  augmented.channel_ptr(cfg.c_bottom + 1));
        const FeatureMap want = apply_mask_head(augmented, unpack_filter_params(theta, cfg));
        CHECK(got->value.data == want.data);
    }
}

TEST_CASE("with featureless bottom input the dynamic head translates with its generator") {
    // On all-zero bottom features the head sees only the coordinate channels,
    // so moving the generator by whole cells shifts the logit map exactly.
    ModelConfig cfg = tiny_config();
    Model model(cfg, 31);
    const int n = num_filter_params(cfg);
    std::vector<double> theta(n);
    Rng rng(37);
    for (double& v : theta) v = rng.uniform(-1.0, 1.0);
    FeatureMap theta_map(n, 1, 1);
    theta_map.data = theta;

    const FeatureMap bottom(cfg.c_bottom, 8, 8, 8, 0.0);
    auto logits_for = [&](int px, int py) {
        Tape tape(false);
        const FeatureMap coords =
            make_relative_coords(px, py, 8, 8, 8, CoordMode::rel, cfg.coord_norm_constant);
        FeatureMap tm = theta_map;
        return model.apply_mask_head_on_tape(tape, tape.input(bottom), coords, tape.input(tm))
            ->value;
    };
    const FeatureMap base = logits_for(20, 28);       // cell (2, 3)
    const FeatureMap moved = logits_for(20 + 8, 28 + 16);  // one right, two down
    for (int y = 2; y < 8; ++y)
        for (int x = 1; x < 8; ++x) CHECK(moved.at(0, y, x) == base.at(0, y - 2, x - 1));
}

TEST_CASE("gradients flow from a mask-and-heads loss into every parameter group") {
    const ModelConfig cfg = tiny_config();
    const FeatureMap image = random_map(3, 32, 32, 41);
    Model model(cfg, 43);
    ParamStore& ps = model.params();
    const size_t np = ps.size();

    Rng rng(47);
    auto coeffs = [&](size_t n) {
        std::vector<double> c(n);
        for (double& v : c) v = rng.uniform(-1.0, 1.0);
        return c;
    };
    const auto c_cls = coeffs(2 * 4 * 4), c_box = coeffs(4 * 4 * 4), c_ctr = coeffs(16);
    const auto c_sem = coeffs(3 * 4 * 4), c_mask = coeffs(64);

    auto run = [&](Tape& tape) {
        const ModelOutputs out = model.forward(tape, image);
        const HeadVars& h = out.heads.at(3);
        const Var theta = tape.pixel_vector(h.controller, 1, 2);
        const FeatureMap coords = make_relative_coords(
            map_cell_to_input(2, 8), map_cell_to_input(1, 8), 4, 4, 8, cfg.coord_mode,
            cfg.coord_norm_constant);
        Var mask = model.apply_mask_head_on_tape(tape, out.bottom, coords, theta);
        mask = tape.upsample(tape.sigmoid(mask), 2);
        return tape.weighted_sum({dot_loss(tape, h.cls, c_cls), dot_loss(tape, h.box, c_box),
                                  dot_loss(tape, h.ctr, c_ctr), dot_loss(tape, out.semantic, c_sem),
                                  dot_loss(tape, mask, c_mask)},
                                 {1.0, 1.0, 1.0, 1.0, 1.0});
    };

    Tape tape(true);
    Var loss = run(tape);
    tape.backward(loss);

    // Every parameter group receives some gradient.
    for (const auto& seg : ps.segments()) {
        double mag = 0.0;
        for (size_t i = 0; i < seg.size; ++i) mag += std::abs(ps.grads()[seg.offset + i]);
        CHECK_MESSAGE(mag > 0.0, seg.name);
    }

    std::vector<double> params(ps.values(), ps.values() + np);
    std::vector<double> analytic(ps.grads(), ps.grads() + np);
    auto f = [&](const std::vector<double>& p) {
        std::copy(p.begin(), p.end(), ps.values());
        Tape t(false);
        return run(t)->value.data[0];
    };
    const GradCheckReport rep = finite_diff_check(f, params, analytic, 140, 1e-5, 53);
    CHECK_FALSE(rep.failed);
    CHECK(rep.max_rel_err < 1e-3);
    std::copy(params.begin(), params.end(), ps.values());
}

TEST_CASE("the static arm swaps the controller for one trainable parameter vector") {
    ModelConfig cfg = tiny_config();
    cfg.static_mask_head = true;
    Model model(cfg, 59);
    const int n = num_filter_params(cfg);

    CHECK(model.params().find("head.controller.weight") == nullptr);
    const ParamStore::Segment* theta = model.params().find("static_head.theta");
    REQUIRE(theta != nullptr);
    CHECK(theta->size == static_cast<size_t>(n));
    CHECK_FALSE(theta->decay);

    const FeatureMap image = random_map(3, 32, 32, 61);
    Tape probe(false);
    const ModelOutputs out = model.forward(probe, image);
    CHECK(out.heads.at(3).controller == nullptr);

    // Gradients reach the shared vector through the taped head.
    Rng rng(67);
    std::vector<double> cs(16);
    for (double& v : cs) v = rng.uniform(-1.0, 1.0);
    auto run = [&](Tape& tape) {
        const ModelOutputs o = model.forward(tape, image);
        const FeatureMap coords = make_relative_coords(
            12, 12, 4, 4, 8, CoordMode::none, cfg.coord_norm_constant);
        const Var mask =
            tape.sigmoid(model.apply_mask_head_on_tape(tape, o.bottom, coords,
                                                       model.static_theta_on_tape(tape)));
        return dot_loss(tape, mask, cs);
    };
    Tape tape(true);
    Var loss = run(tape);
    tape.backward(loss);
    ParamStore& ps = model.params();
    double mag = 0.0;
    for (size_t i = 0; i < theta->size; ++i) mag += std::abs(ps.grads()[theta->offset + i]);
    CHECK(mag > 0.0);

    std::vector<double> params(ps.values(), ps.values() + ps.size());
    std::vector<double> analytic(ps.grads(), ps.grads() + ps.size());
    auto f = [&](const std::vector<double>& p) {
        std::copy(p.begin(), p.end(), ps.values());
        Tape t(false);
        return run(t)->value.data[0];
    };
    const GradCheckReport rep = finite_diff_check(f, params, analytic, 80, 1e-5, 71);
    CHECK_FALSE(rep.failed);
    std::copy(params.begin(), params.end(), ps.values());

    // The other arm has no shared vector to hand out.
    Model plain(tiny_config(), 1);
    CHECK(thrown_kind([&] {
              Tape t;
              plain.static_theta_on_tape(t);
          }) == ErrorKind::usage);
}

TEST_CASE("weight decay flags exempt biases, the controller and the static vector") {
    Model model(ModelConfig{}, 73);
    for (const auto& s : model.params().segments()) {
        const bool is_bias = s.name.size() > 5 && s.name.ends_with(".bias");
        if (is_bias || s.name == "head.controller.weight")
            CHECK_MESSAGE(!s.decay, s.name);
        else
            CHECK_MESSAGE(s.decay, s.name);
    }
    ModelConfig scfg;
    scfg.static_mask_head = true;
    Model stat(scfg, 73);
    CHECK_FALSE(stat.params().find("static_head.theta")->decay);
}

TEST_CASE("construction is deterministic in the seed") {
    ModelConfig cfg = tiny_config();
    Model a(cfg, 97), b(cfg, 97), c(cfg, 98);
    const size_t n = a.params().size();
    REQUIRE(b.params().size() == n);
    CHECK(std::equal(a.params().values(), a.params().values() + n, b.params().values()));
    CHECK_FALSE(std::equal(a.params().values(), a.params().values() + n, c.params().values()));
}

TEST_CASE("checkpoints round-trip bitwise and reject tampering") {
    const fs::path dir = fresh_dir("condinst_model_ckpt");
    ModelConfig cfg = tiny_config();
    cfg.coord_mode = CoordMode::abs;
    Model model(cfg, 101);
    model.save(dir.string());

    Model back = Model::load(dir.string());
    CHECK(back.config().coord_mode == CoordMode::abs);
    CHECK(back.config().head_channels == cfg.head_channels);
    REQUIRE(back.params().size() == model.params().size());
    CHECK(std::equal(model.params().values(), model.params().values() + model.params().size(),
                     back.params().values()));

    // Saved and reloaded models answer identically.
    const FeatureMap image = random_map(3, 32, 32, 103);
    Tape t1(false), t2(false);
    CHECK(model.forward(t1, image).heads.at(3).cls->value.data ==
          back.forward(t2, image).heads.at(3).cls->value.data);

    // Truncated weights are rejected with the byte counts.
    const fs::path wpath = dir / "weights.bin";
    const auto full_size = fs::file_size(wpath);
    fs::resize_file(wpath, full_size - 8);
    CHECK(thrown_kind([&] { Model::load(dir.string()); }) == ErrorKind::data);

    // A non-finite value is rejected.
    model.save(dir.string());
    {
        std::fstream f(wpath, std::ios::in | std::ios::out | std::ios::binary);
        const uint64_t nan_bits = 0x7ff8000000000000ull;
        f.seekp(5 * 8);
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((nan_bits >> (8 * i)) & 0xff);
        f.write(reinterpret_cast<char*>(b), 8);
    }
    CHECK(thrown_kind([&] { Model::load(dir.string()); }) == ErrorKind::data);

    // A mismatching parameter table is rejected.
    model.save(dir.string());
    nlohmann::json meta = load_json_file((dir / "model.json").string());
    meta["parameters"][0]["name"] = "backbone.imposter.weight";
    save_json_file((dir / "model.json").string(), meta);
    CHECK(thrown_kind([&] { Model::load(dir.string()); }) == ErrorKind::data);

    fs::remove_all(dir);
}
