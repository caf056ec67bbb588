#include "condinst/condinst.h"

// The C boundary: a context holds flat string configuration; ci_run validates
// it against the schema of one command, resolves defaults, and drives the C++
// modules. Defaults carry a provenance marker in their help lines: [reference
// default] follows the method's published configuration, [toy default] is a
// desk-scale choice.

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "condinst/inference.hpp"
#include "condinst/json_util.hpp"
#include "condinst/metrics.hpp"
#include "condinst/model.hpp"
#include "condinst/png_io.hpp"
#include "condinst/render.hpp"
#include "condinst/rng.hpp"
#include "condinst/synthdata.hpp"
#include "condinst/training.hpp"

namespace fs = std::filesystem;
using condinst::Error;
using condinst::ErrorKind;
using condinst::require;
using nlohmann::json;

struct ci_context {
    std::map<std::string, std::string> config;
    std::string last_error;
    std::string buffer;  // backs ci_schema_json
};

namespace {

// ---------------------------------------------------------------------------
// Schemas

struct OptionSpec {
    const char* key;
    const char* type;  // int, real, bool, string, path, int-list, real-list
    const char* def;
    const char* help;
};

std::vector<OptionSpec> model_options() {
    return {
        {"model.levels", "int-list", "3,4,5", "feature pyramid levels, stride 2^l [toy default]"},
        {"model.head-channels", "int", "32", "channels in the shared heads [toy default]"},
        {"model.depth", "int", "3", "mask-head depth d [reference default]"},
        {"model.width", "int", "8", "mask-head width w [reference default]"},
        {"model.c-bottom", "int", "8", "bottom-branch channels [reference default]"},
        {"model.bottom-level", "int", "3", "bottom-branch stride 2^l [reference default]"},
        {"model.upsample", "int", "2", "mask upsampling factor [reference default]"},
        {"model.classes", "string", "auto",
         "thing classes; auto = read from the dataset manifest [toy default]"},
        {"model.stuff", "string", "auto",
         "stuff classes; auto = read from the dataset manifest [toy default]"},
        {"model.coords", "string", "rel",
         "coordinate channels fed to mask heads: rel, abs or none [reference default]"},
        {"model.coord-norm", "real", "32", "coordinate normalization constant [toy default]"},
        {"model.static-head", "bool", "false",
         "control arm: one shared trainable mask head instead of per-instance filters"},
    };
}

std::vector<OptionSpec> train_options() {
    return {
        {"data", "path", "", "training dataset directory (required)"},
        {"train.iterations", "int", "2000", "SGD iterations [toy default]"},
        {"train.batch", "int", "8", "scenes per iteration [toy default]"},
        {"train.lr", "real", "0.01", "base learning rate [reference default]"},
        {"train.momentum", "real", "0.9", "SGD momentum [reference default]"},
        {"train.weight-decay", "real", "0.0001",
         "L2 decay on weights (never biases or mask-head parameters) [reference default]"},
        {"train.milestones", "int-list", "1500",
         "iterations after which the rate drops [toy default]"},
        {"train.lr-factor", "real", "0.1", "decay factor at each milestone [reference default]"},
        {"train.seed", "uint", "1", "initialization and batching seed [toy default]"},
        {"train.panoptic", "bool", "false",
         "supervise the semantic branch for panoptic stitching"},
        {"train.aux-semantic", "bool", "false",
         "auxiliary semantic loss from amodal masks [reference default: off]"},
        {"train.flip", "bool", "false",
         "left-right flip augmentation; targets recomputed after the flip [toy default]"},
        {"targets.center-radius", "real", "1.5",
         "center-region half-extent in strides [reference default]"},
        {"targets.sample-cap", "int", "64",
         "mask-loss locations kept per image [reference default]"},
        {"targets.soft-masks", "bool", "false",
         "keep block averages as mask targets instead of thresholding [reference default]"},
        {"targets.level-bounds", "real-list", "",
         "per-level max-distance bounds; empty = twice each stride [toy default]"},
        {"weights.mask", "real", "1", "mask-loss weight [reference default]"},
        {"weights.panoptic", "real", "0.5", "semantic-loss weight [reference default]"},
        {"weights.aux", "real", "0.5", "auxiliary semantic weight [reference default]"},
        {"baseline", "bool", "false",
         "train the vanilla-FCN control arm (static head, no coordinates)"},
    };
}

std::vector<OptionSpec> infer_options() {
    return {
        {"infer.score-threshold", "real", "0.05",
         "floor on sqrt(cls*centerness) scores [reference default]"},
        {"infer.topk", "int", "1000", "per-level candidates kept before NMS [reference default]"},
        {"infer.box-nms-iou", "real", "0.6", "box-NMS IoU threshold [reference default]"},
        {"infer.mask-nms-iou", "real", "0.6", "mask-NMS IoU threshold [reference default]"},
        {"infer.keep-top", "int", "100", "detections kept after NMS [reference default]"},
        {"infer.mask-nms", "bool", "false",
         "suppress duplicates by mask overlap; the box head is never consulted"},
        {"infer.mask-threshold", "real", "0.5", "mask binarization level [reference default]"},
        {"infer.panoptic", "bool", "true", "stitch a panoptic map"},
        {"infer.panoptic-score-min", "real", "0.45",
         "instances below this score never claim pixels [reference default]"},
        {"infer.panoptic-max-loss", "real", "0.4",
         "discard an instance losing more than this fraction of its mask [reference default]"},
    };
}

std::vector<OptionSpec> concat(std::initializer_list<std::vector<OptionSpec>> groups) {
    std::vector<OptionSpec> all;
    for (const auto& g : groups) all.insert(all.end(), g.begin(), g.end());
    return all;
}

const std::vector<std::string>& command_names() {
    static const std::vector<std::string> names = {"gen-data", "train", "infer", "eval",
                                                   "bench",    "render", "sweep"};
    return names;
}

const char* command_summary(const std::string& command) {
    if (command == "gen-data") return "generate a synthetic overlapping-shapes dataset";
    if (command == "train") return "train a model (or the static-head control arm) on a dataset";
    if (command == "infer") return "run one image through a checkpoint and write the results";
    if (command == "eval") return "evaluate a checkpoint on a dataset: mask AP and panoptic PQ";
    if (command == "bench") return "time the dynamic mask heads while varying the instance count";
    if (command == "render") return "draw instance and panoptic overlays for a scene or checkpoint";
    return "train and evaluate one configuration axis end to end";
}

const std::vector<OptionSpec>& schema_for(const std::string& command) {
    static const std::map<std::string, std::vector<OptionSpec>> schemas = [] {
        std::map<std::string, std::vector<OptionSpec>> m;
        const OptionSpec out{"out", "path", "", "output directory (required)"};
        m["gen-data"] = concat({{out,
                                 {"seed", "uint", "1", "dataset RNG seed [toy default]"},
                                 {"num-scenes", "int", "100", "scenes to generate [toy default]"},
                                 {"image-size", "int", "64",
                                  "square scene size, divisible by 32 [toy default]"},
                                 {"min-instances", "int", "1", "per scene [toy default]"},
                                 {"max-instances", "int", "5", "per scene [toy default]"},
                                 {"thing-classes", "int", "3", "shape classes [toy default]"},
                                 {"stuff-classes", "int", "2", "background classes [toy default]"},
                                 {"occlusion-prob", "real", "0.5",
                                  "chance a shape is anchored onto another [toy default]"},
                                 {"identical-pair-prob", "real", "0.25",
                                  "chance of an identical-looking overlapping pair [toy default]"}}});
        m["train"] = concat({{out}, model_options(), train_options()});
        m["infer"] = concat({{out,
                              {"checkpoint", "path", "", "checkpoint directory (required)"},
                              {"image", "path", "", "input PNG (or use data + index)"},
                              {"data", "path", "", "dataset directory (or use image)"},
                              {"index", "int", "0", "scene index within data"}},
                             infer_options()});
        m["eval"] = concat({{out,
                             {"checkpoint", "path", "", "checkpoint directory (required)"},
                             {"data", "path", "", "evaluation dataset directory (required)"},
                             {"eval.max-scenes", "int", "0", "cap on evaluated scenes; 0 = all"}},
                            infer_options()});
        m["bench"] = concat({{out,
                              {"checkpoint", "path", "",
                               "checkpoint to time (default: fresh random initialization)"},
                              {"bench.k", "int-list", "1,10,100",
                               "instance counts to time [reference default]"},
                              {"bench.repeats", "int", "9",
                               "timed samples per count (median reported) [toy default]"},
                              {"bench.image-size", "int", "64",
                               "input size for the whole-pipeline baseline [toy default]"},
                              {"bench.seed", "uint", "7", "content seed for synthetic features"}},
                             model_options()});
        m["render"] = concat({{out,
                               {"checkpoint", "path", "",
                                "render predictions from this checkpoint; empty = ground truth"},
                               {"image", "path", "", "input PNG (prediction mode)"},
                               {"data", "path", "", "dataset directory"},
                               {"index", "int", "0", "scene index within data"},
                               {"render.panoptic", "bool", "true",
                                "also write the panoptic overlay with its legend"}},
                              infer_options()});
        m["sweep"] = concat({{out,
                              {"axis", "string", "",
                               "name=v1,v2,... over depth, width, upsample, c-bottom, coords or "
                               "nms (required)"},
                              {"seeds", "int-list", "0,1,2",
                               "training seeds; the summary reports medians [toy default]"},
                              {"data-train", "path", "",
                               "training dataset; generated under out when empty"},
                              {"data-val", "path", "",
                               "validation dataset; generated under out when empty"},
                              {"sweep.train-scenes", "int", "40",
                               "generated training scenes [toy default]"},
                              {"sweep.val-scenes", "int", "16",
                               "generated validation scenes [toy default]"},
                              {"sweep.image-size", "int", "64",
                               "generated scene size [toy default]"},
                              {"sweep.max-instances", "int", "4",
                               "instances per generated scene [toy default]"}},
                             model_options(), train_options(), infer_options()});
        return m;
    }();
    auto it = schemas.find(command);
    if (it == schemas.end()) {
        std::string names;
        for (const std::string& n : command_names()) names += (names.empty() ? "" : ", ") + n;
        throw Error(ErrorKind::usage, "unknown command '" + command + "' (expected one of " +
                                          names + ")");
    }
    return it->second;
}

// ---------------------------------------------------------------------------
// Typed access to the flat configuration

long long parse_int(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        const long long v = std::stoll(value, &used);
        require(used == value.size(), ErrorKind::usage, "");
        return v;
    } catch (...) {
        throw Error(ErrorKind::usage, key + ": expected an integer, got '" + value + "'");
    }
}

double parse_real(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        const double v = std::stod(value, &used);
        require(used == value.size(), ErrorKind::usage, "");
        return v;
    } catch (...) {
        throw Error(ErrorKind::usage, key + ": expected a number, got '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    std::string v = value;
    std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw Error(ErrorKind::usage, key + ": expected true or false, got '" + value + "'");
}

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : value) {
        if (c == ',') {
            parts.push_back(cur);
            cur.clear();
        } else if (!std::isspace(static_cast<unsigned char>(c))) {
            cur += c;
        }
    }
    if (!cur.empty() || !parts.empty()) parts.push_back(cur);
    return parts;
}

class ConfigView {
public:
    ConfigView(const std::map<std::string, std::string>& raw, const std::string& command)
        : schema_(schema_for(command)) {
        for (const auto& [key, value] : raw) {
            require(find(key) != nullptr, ErrorKind::usage,
                    "unknown option '" + key + "' for command '" + command + "'");
            values_[key] = value;
        }
    }

    bool provided(const std::string& key) const { return values_.count(key) > 0; }

    std::string str(const std::string& key) const {
        auto it = values_.find(key);
        if (it != values_.end()) return it->second;
        const OptionSpec* spec = find(key);
        require(spec != nullptr, ErrorKind::usage, "option '" + key + "' is not in the schema");
        return spec->def;
    }

    std::string required_path(const std::string& key) const {
        const std::string v = str(key);
        require(!v.empty(), ErrorKind::usage, "missing required option '" + key + "'");
        return v;
    }

    long long integer(const std::string& key) const { return parse_int(key, str(key)); }
    double real(const std::string& key) const { return parse_real(key, str(key)); }
    bool boolean(const std::string& key) const { return parse_bool(key, str(key)); }

    std::vector<int> int_list(const std::string& key) const {
        std::vector<int> out;
        for (const std::string& p : split_list(str(key)))
            out.push_back(static_cast<int>(parse_int(key, p)));
        return out;
    }

    std::vector<double> real_list(const std::string& key) const {
        std::vector<double> out;
        for (const std::string& p : split_list(str(key))) out.push_back(parse_real(key, p));
        return out;
    }

    /// Every schema key with its final value; paths resolved absolute so the
    /// echo reproduces the run from anywhere.
    json resolved() const {
        json out = json::object();
        for (const OptionSpec& spec : schema_) {
            std::string v = str(spec.key);
            if (std::string(spec.type) == "path" && !v.empty())
                v = fs::absolute(v).lexically_normal().string();
            out[spec.key] = v;
        }
        return out;
    }

private:
    const OptionSpec* find(const std::string& key) const {
        for (const OptionSpec& spec : schema_)
            if (key == spec.key) return &spec;
        return nullptr;
    }

    const std::vector<OptionSpec>& schema_;
    std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Shared driver pieces

json echo_json(const std::string& command, const ConfigView& view) {
    return json{{"command", command}, {"version", ci_version()}, {"config", view.resolved()}};
}

void write_echo(const std::string& out_dir, const std::string& command, const ConfigView& view) {
    fs::create_directories(out_dir);
    condinst::save_json_file((fs::path(out_dir) / "run_config.json").string(),
                             echo_json(command, view));
}

condinst::ModelConfig model_from_view(const ConfigView& view, const std::string& dataset_dir) {
    condinst::ModelConfig mc;
    mc.fpn_levels = view.int_list("model.levels");
    mc.head_channels = static_cast<int>(view.integer("model.head-channels"));
    mc.mask_head_depth = static_cast<int>(view.integer("model.depth"));
    mc.mask_head_width = static_cast<int>(view.integer("model.width"));
    mc.c_bottom = static_cast<int>(view.integer("model.c-bottom"));
    mc.bottom_level = static_cast<int>(view.integer("model.bottom-level"));
    mc.upsample_factor = static_cast<int>(view.integer("model.upsample"));
    mc.coord_norm_constant = view.real("model.coord-norm");
    mc.coord_mode = condinst::coord_mode_from_name(view.str("model.coords"));
    mc.static_mask_head = view.boolean("model.static-head");

    const std::string classes = view.str("model.classes");
    const std::string stuff = view.str("model.stuff");
    if (classes == "auto" || stuff == "auto") {
        if (!dataset_dir.empty()) {
            const json manifest =
                condinst::load_json_file((fs::path(dataset_dir) / "manifest.json").string());
            mc.num_classes = manifest.at("config").at("num_thing_classes").get<int>();
            mc.num_stuff_classes = manifest.at("config").at("num_stuff_classes").get<int>();
        }  // no dataset in sight: keep the built-in 3 thing / 2 stuff classes
    }
    if (classes != "auto") mc.num_classes = static_cast<int>(parse_int("model.classes", classes));
    if (stuff != "auto") mc.num_stuff_classes = static_cast<int>(parse_int("model.stuff", stuff));
    condinst::validate(mc);
    return mc;
}

condinst::TrainConfig train_from_view(const ConfigView& view) {
    condinst::TrainConfig tc;
    tc.iterations = static_cast<int>(view.integer("train.iterations"));
    tc.batch_size = static_cast<int>(view.integer("train.batch"));
    tc.learning_rate = view.real("train.lr");
    tc.momentum = view.real("train.momentum");
    tc.weight_decay = view.real("train.weight-decay");
    tc.lr_milestones = view.int_list("train.milestones");
    tc.lr_factor = view.real("train.lr-factor");
    tc.seed = static_cast<uint64_t>(view.integer("train.seed"));
    tc.panoptic_mode = view.boolean("train.panoptic");
    tc.aux_semantic = view.boolean("train.aux-semantic");
    tc.flip_augmentation = view.boolean("train.flip");
    tc.targets.center_radius = view.real("targets.center-radius");
    tc.targets.sample_cap = static_cast<int>(view.integer("targets.sample-cap"));
    tc.targets.soft_mask_targets = view.boolean("targets.soft-masks");
    tc.targets.level_upper_bounds = view.real_list("targets.level-bounds");
    tc.weights.lambda = view.real("weights.mask");
    tc.weights.mu = view.real("weights.panoptic");
    tc.weights.aux_weight = view.real("weights.aux");
    return tc;
}

condinst::InferenceOptions infer_from_view(const ConfigView& view) {
    condinst::InferenceOptions opt;
    opt.score_threshold = view.real("infer.score-threshold");
    opt.pre_nms_topk = static_cast<int>(view.integer("infer.topk"));
    opt.box_nms_iou = view.real("infer.box-nms-iou");
    opt.mask_nms_iou = view.real("infer.mask-nms-iou");
    opt.keep_top = static_cast<int>(view.integer("infer.keep-top"));
    opt.use_mask_nms = view.boolean("infer.mask-nms");
    opt.mask_threshold = view.real("infer.mask-threshold");
    opt.with_panoptic = view.boolean("infer.panoptic");
    opt.panoptic_score_min = view.real("infer.panoptic-score-min");
    opt.panoptic_max_loss = view.real("infer.panoptic-max-loss");
    condinst::validate(opt);
    return opt;
}

condinst::FeatureMap feature_from_u8(const condinst::ImageU8& png, const std::string& path) {
    require(png.channels == 3, ErrorKind::data, path + ": expected an RGB image");
    condinst::FeatureMap fm(3, png.height, png.width);
    for (int y = 0; y < png.height; ++y)
        for (int x = 0; x < png.width; ++x)
            for (int c = 0; c < 3; ++c)
                fm.at(c, y, x) =
                    png.data[(static_cast<size_t>(y) * png.width + x) * 3 + c] / 255.0;
    return fm;
}

/// The image for `infer`/`render` prediction runs: a PNG path or a dataset
/// scene; exactly one source must be given.
std::pair<condinst::FeatureMap, std::string> load_input_image(const ConfigView& view) {
    const std::string image = view.str("image");
    const std::string data = view.str("data");
    require(image.empty() != data.empty(), ErrorKind::usage,
            "provide exactly one input: image, or data with index");
    if (!image.empty())
        return {feature_from_u8(condinst::read_png_u8(image), image),
                fs::path(image).stem().string()};
    const condinst::Dataset ds = condinst::read_dataset(data);
    const int index = static_cast<int>(view.integer("index"));
    require(index >= 0 && index < static_cast<int>(ds.scenes.size()), ErrorKind::usage,
            "index " + std::to_string(index) + " outside the dataset (" +
                std::to_string(ds.scenes.size()) + " scenes)");
    return {ds.scenes[index].image, "scene" + std::to_string(index)};
}

struct EvalOutcome {
    condinst::APReport ap;
    condinst::PQReport pq;
    int scenes = 0;
};

/// Inference over a dataset: COCO-style mask AP against the amodal instance
/// masks, and PQ against the stored panoptic maps, with the per-category
/// counts summed over scenes before the final averages.
EvalOutcome evaluate_model_on(condinst::Model& model, const condinst::Dataset& ds,
                              const condinst::InferenceOptions& options, int max_scenes) {
    EvalOutcome out;
    const int n = max_scenes > 0
                      ? std::min<int>(max_scenes, static_cast<int>(ds.scenes.size()))
                      : static_cast<int>(ds.scenes.size());
    std::vector<condinst::MaskPrediction> preds;
    std::vector<condinst::MaskGroundTruth> gts;
    std::map<int, condinst::PQClassStat> pq_accum;
    for (int i = 0; i < n; ++i) {
        const condinst::SceneAnnotation& scene = ds.scenes[i];
        const condinst::InferenceResult res =
            condinst::run_inference(model, scene.image, options);
        for (const condinst::InstanceResult& inst : res.instances)
            preds.push_back({i, inst.cls, inst.score, inst.binary});
        for (const condinst::InstanceAnnotation& inst : scene.instances)
            gts.push_back({i, inst.shape.class_id, inst.full_mask});
        if (options.with_panoptic) {
            const condinst::PQReport scene_pq =
                condinst::evaluate_pq(res.panoptic, condinst::panoptic_gt_of_scene(scene));
            for (const auto& [category, stat] : scene_pq.per_class) {
                condinst::PQClassStat& acc = pq_accum[category];
                acc.tp += stat.tp;
                acc.fp += stat.fp;
                acc.fn += stat.fn;
                acc.iou_sum += stat.iou_sum;
            }
        }
    }
    out.ap = condinst::evaluate_ap(preds, gts);
    out.pq.per_class = pq_accum;
    for (auto& [category, stat] : out.pq.per_class) {
        const double denom = stat.tp + 0.5 * stat.fp + 0.5 * stat.fn;
        stat.pq = denom > 0 ? stat.iou_sum / denom : 0.0;
        stat.sq = stat.tp > 0 ? stat.iou_sum / stat.tp : 0.0;
        stat.rq = denom > 0 ? stat.tp / denom : 0.0;
        out.pq.pq += stat.pq;
        out.pq.sq += stat.sq;
        out.pq.rq += stat.rq;
    }
    if (!out.pq.per_class.empty()) {
        out.pq.pq /= out.pq.per_class.size();
        out.pq.sq /= out.pq.per_class.size();
        out.pq.rq /= out.pq.per_class.size();
    }
    out.scenes = n;
    return out;
}

double median_of(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

// ---------------------------------------------------------------------------
// Commands

void run_gen_data(const ConfigView& view) {
    const std::string out = view.required_path("out");
    condinst::DatasetConfig dc;
    dc.num_scenes = static_cast<int>(view.integer("num-scenes"));
    dc.image_size = static_cast<int>(view.integer("image-size"));
    dc.min_instances = static_cast<int>(view.integer("min-instances"));
    dc.max_instances = static_cast<int>(view.integer("max-instances"));
    dc.num_thing_classes = static_cast<int>(view.integer("thing-classes"));
    dc.num_stuff_classes = static_cast<int>(view.integer("stuff-classes"));
    dc.occlusion_prob = view.real("occlusion-prob");
    dc.identical_pair_prob = view.real("identical-pair-prob");
    dc.rng_seed = static_cast<uint64_t>(view.integer("seed"));
    condinst::validate(dc);

    std::vector<condinst::SceneAnnotation> scenes;
    scenes.reserve(dc.num_scenes);
    for (int i = 0; i < dc.num_scenes; ++i) scenes.push_back(condinst::generate_scene(dc, i));
    condinst::write_dataset(dc, scenes, out);
    write_echo(out, "gen-data", view);
}

void run_train(const ConfigView& view) {
    const std::string out = view.required_path("out");
    const std::string data = view.required_path("data");
    const condinst::ModelConfig mc = model_from_view(view, data);
    const condinst::TrainConfig tc = train_from_view(view);
    if (view.boolean("baseline"))
        condinst::train_vanilla_fcn_baseline(mc, data, tc, out);
    else
        condinst::train(mc, data, tc, out);
    // The loop already wrote the structured run_config.json; append the flat
    // command echo so the run reproduces from either form.
    const std::string rc = (fs::path(out) / "run_config.json").string();
    json merged = condinst::load_json_file(rc);
    merged["cli"] = echo_json("train", view);
    condinst::save_json_file(rc, merged);
}

void run_infer(const ConfigView& view) {
    const std::string out = view.required_path("out");
    condinst::Model model = condinst::Model::load(view.required_path("checkpoint"));
    const auto [image, stem] = load_input_image(view);
    const condinst::InferenceResult result =
        condinst::run_inference(model, image, infer_from_view(view));
    fs::create_directories(out);
    condinst::write_image_results(out, stem, result);
    write_echo(out, "infer", view);
}

void run_eval(const ConfigView& view) {
    const std::string out = view.required_path("out");
    condinst::Model model = condinst::Model::load(view.required_path("checkpoint"));
    const condinst::Dataset ds = condinst::read_dataset(view.required_path("data"));
    const condinst::InferenceOptions options = infer_from_view(view);
    const EvalOutcome outcome = evaluate_model_on(
        model, ds, options, static_cast<int>(view.integer("eval.max-scenes")));
    fs::create_directories(out);
    json metrics{{"num_scenes", outcome.scenes},
                 {"ap", condinst::ap_report_to_json(outcome.ap)}};
    if (options.with_panoptic) metrics["pq"] = condinst::pq_report_to_json(outcome.pq);
    condinst::save_json_file((fs::path(out) / "metrics.json").string(), metrics);
    write_echo(out, "eval", view);
}

void run_bench(const ConfigView& view) {
    const std::string out = view.required_path("out");
    const std::string checkpoint = view.str("checkpoint");
    condinst::Model model = checkpoint.empty()
                                ? condinst::Model(model_from_view(view, ""), 1)
                                : condinst::Model::load(checkpoint);
    const int size = static_cast<int>(view.integer("bench.image-size"));
    const int stride = model.config().bottom_stride();
    require(size > 0 && size % 32 == 0, ErrorKind::usage,
            "bench.image-size must be a positive multiple of 32");
    condinst::FeatureMap bottom(model.config().c_bottom, size / stride, size / stride);
    condinst::Rng rng(static_cast<uint64_t>(view.integer("bench.seed")));
    for (double& v : bottom.data) v = rng.uniform01();

    std::vector<int> ks = view.int_list("bench.k");
    std::sort(ks.begin(), ks.end());
    ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
    require(!ks.empty(), ErrorKind::usage, "bench.k needs at least one instance count");

    const condinst::TimingReport report = condinst::bench_mask_head(
        model, bottom, ks, static_cast<int>(view.integer("bench.repeats")));
    fs::create_directories(out);
    condinst::write_timings_csv((fs::path(out) / "timings.csv").string(), report);
    json rows = json::array();
    for (const condinst::TimingRow& row : report.rows)
        rows.push_back({{"k", row.k},
                        {"median_ms", row.median_ms},
                        {"p10_ms", row.p10_ms},
                        {"p90_ms", row.p90_ms},
                        {"inner", row.inner}});
    condinst::save_json_file((fs::path(out) / "bench.json").string(),
                             json{{"rows", rows},
                                  {"total_inference_ms", report.total_inference_ms},
                                  {"mask_head_share", report.mask_head_share},
                                  {"repeats", report.repeats}});
    write_echo(out, "bench", view);
}

void run_render(const ConfigView& view) {
    const std::string out = view.required_path("out");
    const std::string checkpoint = view.str("checkpoint");
    fs::create_directories(out);
    if (checkpoint.empty()) {
        // Ground-truth mode: overlays straight from the stored annotation.
        const condinst::Dataset ds = condinst::read_dataset(view.required_path("data"));
        const int index = static_cast<int>(view.integer("index"));
        require(index >= 0 && index < static_cast<int>(ds.scenes.size()), ErrorKind::usage,
                "index " + std::to_string(index) + " outside the dataset (" +
                    std::to_string(ds.scenes.size()) + " scenes)");
        const condinst::SceneAnnotation& scene = ds.scenes[index];
        const std::string stem = "scene" + std::to_string(index);
        condinst::write_png_u8((fs::path(out) / (stem + "_instances.png")).string(),
                               condinst::render_scene_instances(scene));
        if (view.boolean("render.panoptic"))
            condinst::write_png_u8(
                (fs::path(out) / (stem + "_panoptic.png")).string(),
                condinst::render_panoptic(condinst::panoptic_gt_of_scene(scene),
                                          scene.num_stuff));
    } else {
        condinst::Model model = condinst::Model::load(checkpoint);
        const auto [image, stem] = load_input_image(view);
        const condinst::InferenceOptions options = infer_from_view(view);
        const condinst::InferenceResult result = condinst::run_inference(model, image, options);
        condinst::write_png_u8((fs::path(out) / (stem + "_instances.png")).string(),
                               condinst::render_instances(image, result.instances));
        if (view.boolean("render.panoptic") && options.with_panoptic)
            condinst::write_png_u8((fs::path(out) / (stem + "_panoptic.png")).string(),
                                   condinst::render_panoptic(
                                       result.panoptic, model.config().num_stuff_classes));
    }
    write_echo(out, "render", view);
}

/// Trains one configuration unless an identical run is already cached under
/// out/cache (keyed by the model + training configs and the dataset path).
/// Returns the directory that holds checkpoint_final.
std::string cached_train(const std::string& out, const condinst::ModelConfig& mc,
                         const std::string& dataset_dir, const condinst::TrainConfig& tc) {
    const std::string key = condinst::model_config_to_json(mc).dump() +
                            condinst::train_config_to_json(tc).dump() +
                            fs::weakly_canonical(dataset_dir).string();
    char name[24];
    std::snprintf(name, sizeof name, "%016zx", std::hash<std::string>{}(key));
    const std::string dir = (fs::path(out) / "cache" / name).string();
    if (!fs::exists(fs::path(dir) / "checkpoint_final" / "model.json"))
        condinst::train(mc, dataset_dir, tc, dir);
    return dir;
}

std::string ensure_dataset(const ConfigView& view, const std::string& explicit_dir,
                           const std::string& fallback_dir, int num_scenes, uint64_t seed) {
    if (!explicit_dir.empty()) return explicit_dir;
    if (!fs::exists(fs::path(fallback_dir) / "manifest.json")) {
        condinst::DatasetConfig dc;
        dc.num_scenes = num_scenes;
        dc.image_size = static_cast<int>(view.integer("sweep.image-size"));
        dc.max_instances = static_cast<int>(view.integer("sweep.max-instances"));
        dc.rng_seed = seed;
        condinst::validate(dc);
        std::vector<condinst::SceneAnnotation> scenes;
        scenes.reserve(dc.num_scenes);
        for (int i = 0; i < dc.num_scenes; ++i)
            scenes.push_back(condinst::generate_scene(dc, i));
        condinst::write_dataset(dc, scenes, fallback_dir);
    }
    return fallback_dir;
}

void apply_axis(const std::string& axis, const std::string& value, condinst::ModelConfig& mc,
                condinst::InferenceOptions& opt) {
    if (axis == "depth")
        mc.mask_head_depth = static_cast<int>(parse_int("axis depth", value));
    else if (axis == "width")
        mc.mask_head_width = static_cast<int>(parse_int("axis width", value));
    else if (axis == "upsample")
        mc.upsample_factor = static_cast<int>(parse_int("axis upsample", value));
    else if (axis == "c-bottom")
        mc.c_bottom = static_cast<int>(parse_int("axis c-bottom", value));
    else if (axis == "coords")
        mc.coord_mode = condinst::coord_mode_from_name(value);
    else if (axis == "nms") {
        require(value == "box" || value == "mask", ErrorKind::usage,
                "axis nms: expected box or mask, got '" + value + "'");
        opt.use_mask_nms = value == "mask";
    } else {
        throw Error(ErrorKind::usage,
                    "unknown sweep axis '" + axis +
                        "' (expected depth, width, upsample, c-bottom, coords or nms)");
    }
    condinst::validate(mc);
}

void run_sweep(const ConfigView& view) {
    const std::string out = view.required_path("out");
    const std::string axis_spec = view.str("axis");
    const size_t eq = axis_spec.find('=');
    require(!axis_spec.empty() && eq != std::string::npos && eq > 0, ErrorKind::usage,
            "axis must look like name=v1,v2,... (e.g. depth=1,2,3)");
    const std::string axis = axis_spec.substr(0, eq);
    const std::vector<std::string> values = split_list(axis_spec.substr(eq + 1));
    require(!values.empty(), ErrorKind::usage, "axis '" + axis + "' lists no values");
    const std::vector<int> seeds = view.int_list("seeds");
    require(!seeds.empty(), ErrorKind::usage, "seeds lists no values");

    fs::create_directories(out);
    const std::string dtrain = ensure_dataset(
        view, view.str("data-train"), (fs::path(out) / "data-train").string(),
        static_cast<int>(view.integer("sweep.train-scenes")), 211);
    const std::string dval = ensure_dataset(
        view, view.str("data-val"), (fs::path(out) / "data-val").string(),
        static_cast<int>(view.integer("sweep.val-scenes")), 212);

    const condinst::ModelConfig base_mc = model_from_view(view, dtrain);
    const condinst::TrainConfig base_tc = train_from_view(view);
    const condinst::InferenceOptions base_opt = infer_from_view(view);
    const condinst::Dataset val = condinst::read_dataset(dval);

    std::ofstream runs((fs::path(out) / "sweep_runs.csv").string());
    require(runs.good(), ErrorKind::data, "cannot write sweep_runs.csv under " + out);
    runs << "axis,value,seed,ap,ap50,ap75,pq\n";
    std::ofstream summary((fs::path(out) / "sweep.csv").string());
    require(summary.good(), ErrorKind::data, "cannot write sweep.csv under " + out);
    summary << "axis,value,seeds,ap,ap50,ap75,pq\n";

    for (const std::string& value : values) {
        std::vector<double> aps, ap50s, ap75s, pqs;
        for (int seed : seeds) {
            condinst::ModelConfig mc = base_mc;
            condinst::InferenceOptions opt = base_opt;
            apply_axis(axis, value, mc, opt);
            condinst::TrainConfig tc = base_tc;
            tc.seed = static_cast<uint64_t>(seed);
            const std::string run_dir = cached_train(out, mc, dtrain, tc);
            condinst::Model model =
                condinst::Model::load((fs::path(run_dir) / "checkpoint_final").string());
            const EvalOutcome outcome = evaluate_model_on(model, val, opt, 0);
            aps.push_back(outcome.ap.ap);
            ap50s.push_back(outcome.ap.ap50);
            ap75s.push_back(outcome.ap.ap75);
            pqs.push_back(outcome.pq.pq);
            char row[160];
            std::snprintf(row, sizeof row, "%s,%s,%d,%.6f,%.6f,%.6f,%.6f\n", axis.c_str(),
                          value.c_str(), seed, outcome.ap.ap, outcome.ap.ap50, outcome.ap.ap75,
                          outcome.pq.pq);
            runs << row;
            runs.flush();
        }
        char row[160];
        std::snprintf(row, sizeof row, "%s,%s,%zu,%.6f,%.6f,%.6f,%.6f\n", axis.c_str(),
                      value.c_str(), seeds.size(), median_of(aps), median_of(ap50s),
                      median_of(ap75s), median_of(pqs));
        summary << row;
        summary.flush();
    }
    require(runs.good() && summary.good(), ErrorKind::data, "sweep csv write failed");
    write_echo(out, "sweep", view);
}

void dispatch(const std::string& command, const ConfigView& view) {
    if (command == "gen-data")
        run_gen_data(view);
    else if (command == "train")
        run_train(view);
    else if (command == "infer")
        run_infer(view);
    else if (command == "eval")
        run_eval(view);
    else if (command == "bench")
        run_bench(view);
    else if (command == "render")
        run_render(view);
    else
        run_sweep(view);
}

json schema_json_of(const std::string& command) {
    json options = json::array();
    for (const OptionSpec& spec : schema_for(command))
        options.push_back({{"key", spec.key},
                           {"type", spec.type},
                           {"default", spec.def},
                           {"help", spec.help}});
    return json{{"command", command},
                {"summary", command_summary(command)},
                {"options", std::move(options)}};
}

ci_status status_of(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::usage: return CI_USAGE_ERROR;
        case ErrorKind::data: return CI_DATA_ERROR;
        default: return CI_NUMERIC_ERROR;
    }
}

}  // namespace

extern "C" {

const char* ci_version(void) { return "condinst 1.0.0"; }

ci_context* ci_context_new(void) { return new (std::nothrow) ci_context; }

void ci_context_free(ci_context* ctx) { delete ctx; }

ci_status ci_set(ci_context* ctx, const char* key, const char* value) {
    if (ctx == nullptr) return CI_USAGE_ERROR;
    if (key == nullptr || *key == '\0' || value == nullptr) {
        ctx->last_error = "ci_set needs a non-empty key and a value";
        return CI_USAGE_ERROR;
    }
    ctx->last_error.clear();
    ctx->config[key] = value;
    return CI_OK;
}

ci_status ci_load_config_file(ci_context* ctx, const char* path) {
    if (ctx == nullptr) return CI_USAGE_ERROR;
    if (path == nullptr) {
        ctx->last_error = "ci_load_config_file needs a path";
        return CI_USAGE_ERROR;
    }
    ctx->last_error.clear();
    std::ifstream in(path);
    if (!in.good()) {
        ctx->last_error = std::string("cannot open config file: ") + path;
        return CI_DATA_ERROR;
    }
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string stripped = trim(line);
        if (stripped.empty()) continue;
        const size_t eq = stripped.find('=');
        if (eq == std::string::npos || trim(stripped.substr(0, eq)).empty()) {
            ctx->last_error = std::string(path) + ":" + std::to_string(lineno) +
                              ": expected key = value";
            return CI_DATA_ERROR;
        }
        ctx->config[trim(stripped.substr(0, eq))] = trim(stripped.substr(eq + 1));
    }
    return CI_OK;
}

void ci_reset(ci_context* ctx) {
    if (ctx != nullptr) ctx->config.clear();
}

ci_status ci_run(ci_context* ctx, const char* command) {
    if (ctx == nullptr) return CI_USAGE_ERROR;
    if (command == nullptr || *command == '\0') {
        ctx->last_error = "ci_run needs a command name";
        return CI_USAGE_ERROR;
    }
    ctx->last_error.clear();
    try {
        ConfigView view(ctx->config, command);
        dispatch(command, view);
        return CI_OK;
    } catch (const Error& e) {
        ctx->last_error = e.what();
        return status_of(e.kind());
    } catch (const std::exception& e) {
        ctx->last_error = e.what();
        return CI_DATA_ERROR;
    }
}

const char* ci_last_error(const ci_context* ctx) {
    static const char empty[] = "";
    return ctx == nullptr ? empty : ctx->last_error.c_str();
}

const char* ci_schema_json(ci_context* ctx, const char* command) {
    static const char empty[] = "";
    if (ctx == nullptr) return empty;
    ctx->last_error.clear();
    try {
        if (command == nullptr) {
            json all = json::array();
            for (const std::string& name : command_names()) all.push_back(schema_json_of(name));
            ctx->buffer = json{{"commands", std::move(all)}}.dump(2);
        } else {
            ctx->buffer = schema_json_of(command).dump(2);
        }
        return ctx->buffer.c_str();
    } catch (const std::exception& e) {
        ctx->last_error = e.what();
        return empty;
    }
}

}  // extern "C"
