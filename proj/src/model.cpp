#include "condinst/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "condinst/json_util.hpp"
#include "condinst/ops.hpp"
#include "condinst/rng.hpp"

namespace condinst {

namespace fs = std::filesystem;

CoordMode coord_mode_from_name(const std::string& name) {
    if (name == "rel") return CoordMode::rel;
    if (name == "abs") return CoordMode::abs;
    if (name == "none") return CoordMode::none;
    throw Error(ErrorKind::usage, "unknown coord mode '" + name + "' (rel, abs or none)");
}

const char* coord_mode_name(CoordMode mode) {
    switch (mode) {
        case CoordMode::rel: return "rel";
        case CoordMode::abs: return "abs";
        case CoordMode::none: return "none";
    }
    throw Error(ErrorKind::usage, "invalid coord mode value");
}

void validate(const ModelConfig& c) {
    require(!c.fpn_levels.empty(), ErrorKind::usage, "at least one pyramid level is required");
    for (size_t i = 0; i < c.fpn_levels.size(); ++i) {
        const int l = c.fpn_levels[i];
        require(l >= 2 && l <= 7, ErrorKind::usage,
                "pyramid level " + std::to_string(l) + " outside the supported range [2,7]");
        if (i > 0)
            require(l == c.fpn_levels[i - 1] + 1, ErrorKind::usage,
                    "pyramid levels must be contiguous and ascending");
    }
    require(c.bottom_level == 2 || c.bottom_level == 3, ErrorKind::usage,
            "bottom level must be 2 or 3");
    require(c.upsample_factor == 1 || c.upsample_factor == 2 || c.upsample_factor == 4,
            ErrorKind::usage, "mask upsample factor must be 1, 2 or 4");
    require(c.head_channels >= 1, ErrorKind::usage, "head channels must be positive");
    require(c.mask_head_depth >= 1, ErrorKind::usage, "mask head depth must be at least 1");
    require(c.mask_head_width >= 1, ErrorKind::usage, "mask head width must be positive");
    require(c.c_bottom >= 1, ErrorKind::usage, "bottom channel count must be positive");
    require(c.num_classes >= 1, ErrorKind::usage, "need at least one thing class");
    require(c.num_stuff_classes >= 1, ErrorKind::usage, "need at least one stuff class");
    require(c.coord_norm_constant > 0.0, ErrorKind::usage,
            "coordinate normalisation constant must be positive");
}

nlohmann::json model_config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"fpn_levels", c.fpn_levels},
                          {"head_channels", c.head_channels},
                          {"mask_head_depth", c.mask_head_depth},
                          {"mask_head_width", c.mask_head_width},
                          {"c_bottom", c.c_bottom},
                          {"bottom_level", c.bottom_level},
                          {"upsample_factor", c.upsample_factor},
                          {"num_classes", c.num_classes},
                          {"num_stuff_classes", c.num_stuff_classes},
                          {"coord_norm_constant", c.coord_norm_constant},
                          {"coord_mode", coord_mode_name(c.coord_mode)},
                          {"static_mask_head", c.static_mask_head}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.fpn_levels = j.at("fpn_levels").get<std::vector<int>>();
        c.head_channels = j.at("head_channels").get<int>();
        c.mask_head_depth = j.at("mask_head_depth").get<int>();
        c.mask_head_width = j.at("mask_head_width").get<int>();
        c.c_bottom = j.at("c_bottom").get<int>();
        c.bottom_level = j.at("bottom_level").get<int>();
        c.upsample_factor = j.at("upsample_factor").get<int>();
        c.num_classes = j.at("num_classes").get<int>();
        c.num_stuff_classes = j.at("num_stuff_classes").get<int>();
        c.coord_norm_constant = j.at("coord_norm_constant").get<double>();
        c.coord_mode = coord_mode_from_name(j.at("coord_mode").get<std::string>());
        c.static_mask_head = j.at("static_mask_head").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::data, std::string("bad model config: ") + e.what());
    }
    validate(c);
    return c;
}

int num_filter_params(const ModelConfig& c) {
    const int in0 = c.c_bottom + 2;  // bottom channels plus two coordinate channels
    const int w = c.mask_head_width;
    const int d = c.mask_head_depth;
    if (d == 1) return in0 + 1;
    const int weights = in0 * w + (d - 2) * w * w + w;
    const int biases = (d - 1) * w + 1;
    return weights + biases;
}

ThetaLayout theta_layout(const ModelConfig& c) {
    ThetaLayout lay;
    int in = c.c_bottom + 2;
    size_t cursor = 0;
    for (int i = 0; i < c.mask_head_depth; ++i) {
        const int out = (i + 1 == c.mask_head_depth) ? 1 : c.mask_head_width;
        ThetaLayout::Layer layer;
        layer.in_channels = in;
        layer.out_channels = out;
        layer.weight_offset = cursor;
        cursor += static_cast<size_t>(in) * out;
        layer.bias_offset = cursor;
        cursor += out;
        lay.layers.push_back(layer);
        in = out;
    }
    lay.total = cursor;
    require(lay.total == static_cast<size_t>(num_filter_params(c)), ErrorKind::usage,
            "filter layout does not match the closed-form parameter count");
    return lay;
}

size_t MaskHead::parameter_count() const {
    size_t n = 0;
    for (const ConvSpec& l : layers) n += l.weight_count() + l.bias.size();
    return n;
}

MaskHead unpack_filter_params(const std::vector<double>& theta, const ModelConfig& config) {
    const ThetaLayout lay = theta_layout(config);
    require(theta.size() == lay.total, ErrorKind::usage,
            "dynamic parameter vector has length " + std::to_string(theta.size()) +
                ", expected " + std::to_string(lay.total));
    MaskHead head;
    for (const ThetaLayout::Layer& l : lay.layers) {
        ConvSpec conv;
        conv.in_channels = l.in_channels;
        conv.out_channels = l.out_channels;
        conv.kernel = 1;
        conv.weights.assign(theta.begin() + l.weight_offset,
                            theta.begin() + l.weight_offset + l.in_channels * l.out_channels);
        conv.bias.assign(theta.begin() + l.bias_offset, theta.begin() + l.bias_offset + l.out_channels);
        head.layers.push_back(std::move(conv));
    }
    return head;
}

FeatureMap apply_mask_head(const FeatureMap& bottom_with_coords, const MaskHead& head) {
    require(!head.layers.empty(), ErrorKind::usage, "mask head has no layers");
    FeatureMap h = conv2d(bottom_with_coords, head.layers[0]);
    for (size_t i = 1; i < head.layers.size(); ++i) {
        h = pointwise(h, Pointwise::relu);
        h = conv2d(h, head.layers[i]);
    }
    return h;
}

FeatureMap make_relative_coords(int generator_px, int generator_py, int bottom_h, int bottom_w,
                                int bottom_stride, CoordMode mode, double norm) {
    require(bottom_h > 0 && bottom_w > 0, ErrorKind::usage, "coordinate map needs a positive size");
    require(norm > 0.0, ErrorKind::usage, "coordinate normalisation constant must be positive");
    FeatureMap o(2, bottom_h, bottom_w, bottom_stride);
    if (mode == CoordMode::none) return o;  // two all-zero channels keep the head width fixed
    for (int y = 0; y < bottom_h; ++y) {
        const int py = map_cell_to_input(y, bottom_stride);
        for (int x = 0; x < bottom_w; ++x) {
            const int px = map_cell_to_input(x, bottom_stride);
            if (mode == CoordMode::rel) {
                o.at(0, y, x) = (px - generator_px) / norm;
                o.at(1, y, x) = (py - generator_py) / norm;
            } else {
                o.at(0, y, x) = px / norm;
                o.at(1, y, x) = py / norm;
            }
        }
    }
    return o;
}

const FeatureMap& run_mask_stage(const ModelConfig& config, const FeatureMap& bottom, int px,
                                 int py, const std::vector<double>& theta,
                                 MaskStageScratch& scratch) {
    require(bottom.channels == config.c_bottom, ErrorKind::usage,
            "bottom features have the wrong channel count");
    require(config.coord_norm_constant > 0.0, ErrorKind::usage,
            "coordinate normalisation constant must be positive");
    const ThetaLayout lay = theta_layout(config);
    require(theta.size() == lay.total, ErrorKind::usage,
            "dynamic parameter vector has length " + std::to_string(theta.size()) +
                ", expected " + std::to_string(lay.total));

    const int h = bottom.height, w = bottom.width, cb = config.c_bottom;
    const size_t plane = static_cast<size_t>(h) * w;
    auto ensure = [&](FeatureMap& m, int channels) {
        if (m.channels != channels || m.height != h || m.width != w)
            m = FeatureMap(channels, h, w, bottom.stride);
        m.stride = bottom.stride;
    };

    // Coordinate planes for this generator; same expressions as
    // make_relative_coords, written into the reused buffer.
    ensure(scratch.coords, 2);
    const double norm = config.coord_norm_constant;
    if (config.coord_mode == CoordMode::none) {
        scratch.coords.fill(0.0);
    } else {
        double* ox = scratch.coords.channel_ptr(0);
        double* oy = scratch.coords.channel_ptr(1);
        for (int y = 0; y < h; ++y) {
            const int cy = map_cell_to_input(y, bottom.stride);
            for (int x = 0; x < w; ++x) {
                const int cx = map_cell_to_input(x, bottom.stride);
                const size_t at = static_cast<size_t>(y) * w + x;
                if (config.coord_mode == CoordMode::rel) {
                    ox[at] = (cx - px) / norm;
                    oy[at] = (cy - py) / norm;
                } else {
                    ox[at] = cx / norm;
                    oy[at] = cy / norm;
                }
            }
        }
    }

    // The 1x1 layer chain, plane-wise with conv2d's accumulation order (bias
    // first, then input channels ascending, so results match bit for bit).
    // Weights and biases are read in place from theta; the first layer pulls
    // its inputs from the bottom and coordinate planes directly. Output
    // channels are processed in tiles of four so the accumulators stay in
    // registers and every input plane is streamed once per tile instead of
    // re-touching each output plane once per input channel.
    const FeatureMap* cur = nullptr;
    for (size_t li = 0; li < lay.layers.size(); ++li) {
        const ThetaLayout::Layer& l = lay.layers[li];
        FeatureMap& dst = li % 2 == 0 ? scratch.h1 : scratch.h2;
        ensure(dst, l.out_channels);
        const double* wts = theta.data() + l.weight_offset;
        const double* bias = theta.data() + l.bias_offset;
        scratch.ins.resize(l.in_channels);
        for (int ic = 0; ic < l.in_channels; ++ic)
            scratch.ins[ic] = li == 0 ? (ic < cb ? bottom.channel_ptr(ic)
                                                 : scratch.coords.channel_ptr(ic - cb))
                                      : cur->channel_ptr(ic);
        const double* const* ins = scratch.ins.data();
        const bool relu = li + 1 < lay.layers.size();

        auto tile = [&](auto oc_count, int oc0) {
            constexpr int kOc = decltype(oc_count)::value;
            const double* wrow[kOc];
            double* op[kOc];
            for (int k = 0; k < kOc; ++k) {
                wrow[k] = wts + static_cast<size_t>(oc0 + k) * l.in_channels;
                op[k] = dst.channel_ptr(oc0 + k);
            }
            for (size_t i = 0; i < plane; ++i) {
                double acc[kOc];
                for (int k = 0; k < kOc; ++k) acc[k] = bias[oc0 + k];
                for (int ic = 0; ic < l.in_channels; ++ic) {
                    const double v = ins[ic][i];
                    for (int k = 0; k < kOc; ++k) acc[k] += wrow[k][ic] * v;
                }
                for (int k = 0; k < kOc; ++k)
                    op[k][i] = relu ? std::max(0.0, acc[k]) : acc[k];
            }
        };
        int oc0 = 0;
        for (; oc0 + 4 <= l.out_channels; oc0 += 4)
            tile(std::integral_constant<int, 4>{}, oc0);
        for (; oc0 + 2 <= l.out_channels; oc0 += 2)
            tile(std::integral_constant<int, 2>{}, oc0);
        for (; oc0 < l.out_channels; ++oc0) tile(std::integral_constant<int, 1>{}, oc0);
        cur = &dst;
    }

    ensure(scratch.probs, 1);
    for (size_t i = 0; i < plane; ++i) scratch.probs.data[i] = sigmoid(cur->data[i]);

    if (config.upsample_factor > 1) {
        scratch.upsampled = bilinear_upsample(scratch.probs, config.upsample_factor);
        return scratch.upsampled;
    }
    return scratch.probs;
}

// ---------------------------------------------------------------------------
// Model

Model::ConvParam Model::add_conv(const std::string& name, int in_c, int out_c, int k, bool decay) {
    ConvParam p;
    p.in_c = in_c;
    p.out_c = out_c;
    p.k = k;
    p.w = store_.add(name + ".weight", static_cast<size_t>(out_c) * in_c * k * k, decay);
    p.b = store_.add(name + ".bias", static_cast<size_t>(out_c), false);
    return p;
}

Var Model::conv(Tape& tape, Var x, const ConvParam& p) {
    double* v = store_.values();
    double* g = store_.grads();
    return tape.conv(x, v + p.w, v + p.b, g + p.w, g + p.b, p.in_c, p.out_c, p.k);
}

namespace {

// Levels whose merged map must exist so that every required output level
// (heads and bottom-branch sources) can be produced by the top-down pass.
struct LevelPlan {
    std::set<int> outputs;  // levels in [2,5] that need a smoothed map
    int min_chain = 5;      // laterals exist for [min_chain, 5]
    bool p6 = false, p7 = false;
};

LevelPlan plan_levels(const ModelConfig& c) {
    LevelPlan plan;
    plan.outputs = {c.bottom_level, 4, 5};
    for (int l : c.fpn_levels) {
        if (l <= 5) plan.outputs.insert(l);
        if (l == 6) plan.p6 = true;
        if (l == 7) plan.p7 = true;
    }
    plan.min_chain = *plan.outputs.begin();
    return plan;
}

void init_segment(Rng& rng, double* dst, size_t n, double std_dev) {
    for (size_t i = 0; i < n; ++i) dst[i] = std_dev > 0.0 ? std_dev * rng.normal() : 0.0;
}

}  // namespace

Model::Model(const ModelConfig& config, uint64_t init_seed) : config_(config) {
    validate(config_);
    const int hc = config_.head_channels;
    const LevelPlan plan = plan_levels(config_);

    // Registration order is the checkpoint layout; keep it stable.
    stem_ = add_conv("backbone.stem", 3, 8, 3);
    stage1_ = add_conv("backbone.stage1", 8, 16, 3);
    stage2_ = add_conv("backbone.stage2", 16, hc, 3);
    stage3_ = add_conv("backbone.stage3", hc, hc, 3);
    stage4_ = add_conv("backbone.stage4", hc, hc, 3);
    stage5_ = add_conv("backbone.stage5", hc, hc, 3);
    for (int l = plan.min_chain; l <= 5; ++l)
        lateral_[l] = add_conv("fpn.lateral" + std::to_string(l), hc, hc, 1);
    for (int l : plan.outputs) smooth_[l] = add_conv("fpn.smooth" + std::to_string(l), hc, hc, 3);
    if (plan.p6) p6_ = add_conv("fpn.p6", hc, hc, 3);
    if (plan.p7) p7_ = add_conv("fpn.p7", hc, hc, 3);

    for (int i = 0; i < 2; ++i) {
        cls_tower_.push_back(add_conv("head.cls_tower" + std::to_string(i), hc, hc, 3));
        box_tower_.push_back(add_conv("head.box_tower" + std::to_string(i), hc, hc, 3));
    }
    cls_proj_ = add_conv("head.cls", hc, config_.num_classes, 3);
    ctr_proj_ = add_conv("head.centerness", hc, 1, 3);
    box_proj_ = add_conv("head.box", hc, 4, 3);
    const int n_theta = num_filter_params(config_);
    if (!config_.static_mask_head)
        controller_proj_ = add_conv("head.controller", hc, n_theta, 3, /*decay=*/false);

    for (int i = 0; i < 4; ++i)
        bottom_tower_.push_back(add_conv("bottom.tower" + std::to_string(i), hc, hc, 3));
    bottom_reduce_ = add_conv("bottom.reduce", hc, config_.c_bottom, 1);
    semantic_proj_ = add_conv("semantic.logits", hc, config_.semantic_channels(), 1);
    if (config_.static_mask_head)
        static_theta_offset_ = store_.add("static_head.theta", n_theta, false);

    // He-style init for 3x3/1x1 ReLU stacks; the controller (and the static
    // parameter vector) start near zero so early mask heads are gentle, and
    // the classification bias starts at -log(99) so the initial foreground
    // probability is about 0.01 everywhere.
    Rng rng(init_seed);
    double* v = store_.values();
    for (const ParamStore::Segment& s : store_.segments()) {
        if (s.name == "static_head.theta" || s.name == "head.controller.weight") {
            init_segment(rng, v + s.offset, s.size, 0.01);
        } else if (s.name.ends_with(".bias")) {
            double fill = s.name == "head.cls.bias" ? -std::log(99.0) : 0.0;
            std::fill(v + s.offset, v + s.offset + s.size, fill);
        }
    }
    auto he = [&](const ConvParam& p) {
        const double fan_in = static_cast<double>(p.in_c) * p.k * p.k;
        init_segment(rng, store_.values() + p.w, static_cast<size_t>(p.out_c) * p.in_c * p.k * p.k,
                     std::sqrt(2.0 / fan_in));
    };
    he(stem_);
    he(stage1_);
    he(stage2_);
    he(stage3_);
    he(stage4_);
    he(stage5_);
    for (auto& [l, p] : lateral_) he(p);
    for (auto& [l, p] : smooth_) he(p);
    if (plan.p6) he(p6_);
    if (plan.p7) he(p7_);
    for (const ConvParam& p : cls_tower_) he(p);
    for (const ConvParam& p : box_tower_) he(p);
    he(cls_proj_);
    he(ctr_proj_);
    he(box_proj_);
    for (const ConvParam& p : bottom_tower_) he(p);
    he(bottom_reduce_);
    he(semantic_proj_);
}

ModelOutputs Model::forward(Tape& tape, const FeatureMap& image) {
    require(image.channels == 3, ErrorKind::usage,
            "expected a 3-channel image, got " + std::to_string(image.channels) + " channels");
    require(image.stride == 1, ErrorKind::usage, "input image must have stride 1");
    int multiple = 32;  // the backbone always reaches stride 32
    for (int l : config_.fpn_levels) multiple = std::max(multiple, config_.stride_of_level(l));
    if (image.height % multiple != 0 || image.width % multiple != 0) {
        const int ph = (image.height + multiple - 1) / multiple * multiple;
        const int pw = (image.width + multiple - 1) / multiple * multiple;
        throw Error(ErrorKind::usage,
                    "image size " + std::to_string(image.width) + "x" +
                        std::to_string(image.height) + " is not divisible by " +
                        std::to_string(multiple) + "; pad to " + std::to_string(pw) + "x" +
                        std::to_string(ph));
    }

    const LevelPlan plan = plan_levels(config_);
    ModelOutputs out;

    // Backbone: conv-relu-pool blocks down to stride 32.
    Var x = tape.relu(conv(tape, tape.input(image), stem_));
    x = tape.avg_pool(tape.relu(conv(tape, x, stage1_)));
    std::map<int, Var> c;
    c[2] = tape.avg_pool(tape.relu(conv(tape, x, stage2_)));
    c[3] = tape.avg_pool(tape.relu(conv(tape, c[2], stage3_)));
    c[4] = tape.avg_pool(tape.relu(conv(tape, c[3], stage4_)));
    c[5] = tape.avg_pool(tape.relu(conv(tape, c[4], stage5_)));

    // Top-down merge, then a smoothing conv on every output level.
    std::map<int, Var> m;
    m[5] = conv(tape, c[5], lateral_.at(5));
    for (int l = 4; l >= plan.min_chain; --l)
        m[l] = tape.add(conv(tape, c[l], lateral_.at(l)), tape.upsample(m[l + 1], 2));
    for (int l : plan.outputs) out.pyramid[l] = conv(tape, m[l], smooth_.at(l));
    if (plan.p6) out.pyramid[6] = conv(tape, tape.avg_pool(out.pyramid[5]), p6_);
    if (plan.p7) out.pyramid[7] = conv(tape, tape.avg_pool(tape.relu(out.pyramid[6])), p7_);

    // Shared heads over the configured detection levels.
    for (int l : config_.fpn_levels) {
        Var t = out.pyramid.at(l);
        for (const ConvParam& p : cls_tower_) t = tape.relu(conv(tape, t, p));
        Var u = out.pyramid.at(l);
        for (const ConvParam& p : box_tower_) u = tape.relu(conv(tape, u, p));
        HeadVars h;
        h.cls = conv(tape, t, cls_proj_);
        if (!config_.static_mask_head) h.controller = conv(tape, t, controller_proj_);
        h.box = conv(tape, u, box_proj_);
        h.ctr = conv(tape, u, ctr_proj_);
        out.heads[l] = h;
    }

    // Bottom branch: aggregate {bottom level, 4, 5} at the bottom stride.
    const int bs = config_.bottom_stride();
    Var agg;
    for (int src : {config_.bottom_level, 4, 5}) {
        Var s = out.pyramid.at(src);
        int f = config_.stride_of_level(src) / bs;
        while (f > 1) {
            const int step = f >= 4 ? 4 : 2;
            s = tape.upsample(s, step);
            f /= step;
        }
        agg = agg ? tape.add(agg, s) : s;
    }
    Var trunk = agg;
    for (const ConvParam& p : bottom_tower_) trunk = tape.relu(conv(tape, trunk, p));
    out.bottom = conv(tape, trunk, bottom_reduce_);
    out.semantic = conv(tape, trunk, semantic_proj_);
    return out;
}

Var Model::apply_mask_head_on_tape(Tape& tape, Var bottom, const FeatureMap& coords, Var theta) {
    require(coords.channels == 2, ErrorKind::usage, "coordinate map must have 2 channels");
    require(coords.height == bottom->value.height && coords.width == bottom->value.width,
            ErrorKind::usage, "coordinate map and bottom features disagree on size");
    const ThetaLayout lay = theta_layout(config_);
    require(theta->value.size() == lay.total, ErrorKind::usage,
            "dynamic parameter vector has length " + std::to_string(theta->value.size()) +
                ", expected " + std::to_string(lay.total));
    Var h = tape.concat({bottom, tape.input(coords)});
    for (size_t i = 0; i < lay.layers.size(); ++i) {
        const ThetaLayout::Layer& l = lay.layers[i];
        h = tape.dyn_conv1x1(h, theta, l.weight_offset, l.bias_offset, l.in_channels,
                             l.out_channels);
        if (i + 1 < lay.layers.size()) h = tape.relu(h);
    }
    return h;
}

Var Model::static_theta_on_tape(Tape& tape) {
    require(config_.static_mask_head, ErrorKind::usage,
            "the shared parameter vector only exists on the static-head arm");
    const int n = num_filter_params(config_);
    return tape.leaf(store_.values() + static_theta_offset_, store_.grads() + static_theta_offset_,
                     n);
}

// ---------------------------------------------------------------------------
// Checkpoints: weights.bin (flat little-endian float64) + model.json
// (config echo, named parameter table with offsets/sizes, format version).

namespace {

constexpr int kCheckpointVersion = 1;

void write_f64_le(std::ostream& out, double v) {
    const uint64_t u = std::bit_cast<uint64_t>(v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64_le(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<uint64_t>(b[i]) << (8 * i);
    return std::bit_cast<double>(u);
}

}  // namespace

void Model::save(const std::string& directory) const {
    std::error_code ec;
    fs::create_directories(directory, ec);
    require(!ec, ErrorKind::data, "cannot create checkpoint directory " + directory);

    nlohmann::json table = nlohmann::json::array();
    for (const ParamStore::Segment& s : store_.segments())
        table.push_back({{"name", s.name},
                         {"offset", s.offset},
                         {"size", s.size},
                         {"decay", s.decay}});
    nlohmann::json meta{{"format_version", kCheckpointVersion},
                        {"config", model_config_to_json(config_)},
                        {"total_parameters", store_.size()},
                        {"parameters", table}};
    save_json_file((fs::path(directory) / "model.json").string(), meta);

    const std::string wpath = (fs::path(directory) / "weights.bin").string();
    std::ofstream out(wpath, std::ios::binary);
    require(out.good(), ErrorKind::data, "cannot open " + wpath + " for writing");
    const double* v = store_.values();
    for (size_t i = 0; i < store_.size(); ++i) write_f64_le(out, v[i]);
    out.flush();
    require(out.good(), ErrorKind::data, "short write to " + wpath);
}

Model Model::load(const std::string& directory) {
    const std::string mpath = (fs::path(directory) / "model.json").string();
    const nlohmann::json meta = load_json_file(mpath);
    int version = -1;
    ModelConfig config;
    try {
        version = meta.at("format_version").get<int>();
        config = model_config_from_json(meta.at("config"));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::data, mpath + ": " + e.what());
    }
    require(version == kCheckpointVersion, ErrorKind::data,
            mpath + ": unsupported checkpoint version " + std::to_string(version));

    Model model(config, 0);
    const auto& segs = model.store_.segments();
    const nlohmann::json& table = meta.at("parameters");
    require(table.is_array() && table.size() == segs.size(), ErrorKind::data,
            mpath + ": parameter table does not match this configuration");
    for (size_t i = 0; i < segs.size(); ++i) {
        const nlohmann::json& row = table[i];
        const bool ok = row.at("name") == segs[i].name &&
                        row.at("offset").get<size_t>() == segs[i].offset &&
                        row.at("size").get<size_t>() == segs[i].size &&
                        row.at("decay").get<bool>() == segs[i].decay;
        require(ok, ErrorKind::data,
                mpath + ": parameter table mismatch at '" + segs[i].name + "'");
    }

    const std::string wpath = (fs::path(directory) / "weights.bin").string();
    std::ifstream in(wpath, std::ios::binary);
    require(in.good(), ErrorKind::data, "cannot open " + wpath);
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<size_t>(in.tellg());
    in.seekg(0);
    require(bytes == 8 * model.store_.size(), ErrorKind::data,
            wpath + ": expected " + std::to_string(8 * model.store_.size()) + " bytes, found " +
                std::to_string(bytes));
    double* v = model.store_.values();
    for (size_t i = 0; i < model.store_.size(); ++i) v[i] = read_f64_le(in);
    require(in.good(), ErrorKind::data, "short read from " + wpath);
    for (size_t i = 0; i < model.store_.size(); ++i)
        require(std::isfinite(v[i]), ErrorKind::data, wpath + ": non-finite parameter value");
    return model;
}

}  // namespace condinst
