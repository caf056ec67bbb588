#include "condinst/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "condinst/json_util.hpp"
#include "condinst/png_io.hpp"
#include "condinst/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace condinst {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr int kPlacementRetries = 30;
constexpr size_t kMinVisibleArea = 16;

// Muted backgrounds for stuff, saturated fills for things; both cycle when a
// config asks for more classes than the palette holds.
constexpr std::array<std::array<double, 3>, 6> kStuffPalette = {{{0.16, 0.18, 0.22},
                                                                 {0.30, 0.26, 0.20},
                                                                 {0.14, 0.24, 0.18},
                                                                 {0.26, 0.20, 0.28},
                                                                 {0.20, 0.28, 0.30},
                                                                 {0.24, 0.24, 0.16}}};
constexpr std::array<std::array<double, 3>, 6> kThingPalette = {{{0.85, 0.35, 0.30},
                                                                 {0.30, 0.60, 0.85},
                                                                 {0.90, 0.80, 0.30},
                                                                 {0.45, 0.80, 0.40},
                                                                 {0.80, 0.45, 0.80},
                                                                 {0.95, 0.60, 0.25}}};

bool point_in_base_shape(ShapeKind kind, double x, double y, double rx, double ry) {
    switch (kind) {
        case ShapeKind::ellipse: {
            const double nx = x / rx, ny = y / ry;
            return nx * nx + ny * ny <= 1.0;
        }
        case ShapeKind::rectangle:
            return std::abs(x) <= rx && std::abs(y) <= ry;
        case ShapeKind::triangle: {
            // Isosceles triangle inscribed in the (rx, ry) box, apex upward
            // (negative y in image coordinates), vertices every 120 degrees.
            double vx[3], vy[3];
            for (int k = 0; k < 3; ++k) {
                const double a = -kPi / 2 + k * 2.0 * kPi / 3.0;
                vx[k] = std::cos(a) * rx;
                vy[k] = std::sin(a) * ry;
            }
            bool non_neg = true, non_pos = true;
            for (int k = 0; k < 3; ++k) {
                const int j = (k + 1) % 3;
                const double cross =
                    (vx[j] - vx[k]) * (y - vy[k]) - (vy[j] - vy[k]) * (x - vx[k]);
                non_neg = non_neg && cross >= -1e-12;
                non_pos = non_pos && cross <= 1e-12;
            }
            return non_neg || non_pos;
        }
    }
    return false;
}

ImageU8 image_to_u8(const FeatureMap& img) {
    ImageU8 out(img.width, img.height, img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
                out.data[(static_cast<size_t>(y) * img.width + x) * img.channels + c] =
                    static_cast<uint8_t>(std::lround(v * 255.0));
            }
    return out;
}

FeatureMap u8_to_image(const ImageU8& in) {
    FeatureMap img(in.channels, in.height, in.width, 1);
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x)
            for (int c = 0; c < in.channels; ++c)
                img.at(c, y, x) =
                    in.data[(static_cast<size_t>(y) * in.width + x) * in.channels + c] / 255.0;
    return img;
}

Box tight_box_of(const BinaryMask& mask) {
    int x1 = mask.width, y1 = mask.height, x2 = -1, y2 = -1;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(y, x)) {
                x1 = std::min(x1, x);
                y1 = std::min(y1, y);
                x2 = std::max(x2, x);
                y2 = std::max(y2, y);
            }
    if (x2 < 0) return Box{};
    return Box{static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x2 + 1),
               static_cast<double>(y2 + 1)};
}

struct Placed {
    ShapeInstance shape;
    BinaryMask full;
};

// Every instance must keep at least kMinVisibleArea pixels after all
// higher-z-order shapes claim theirs.
bool visible_areas_ok(const std::vector<Placed>& placed, int plane) {
    std::vector<uint8_t> claimed(plane, 0);
    for (int i = static_cast<int>(placed.size()) - 1; i >= 0; --i) {
        size_t visible = 0;
        const auto& m = placed[i].full.data;
        for (int p = 0; p < plane; ++p) visible += (m[p] && !claimed[p]);
        if (visible < kMinVisibleArea) return false;
        for (int p = 0; p < plane; ++p) claimed[p] = claimed[p] | m[p];
    }
    return true;
}

size_t overlap_area(const BinaryMask& a, const BinaryMask& b) {
    size_t n = 0;
    for (size_t p = 0; p < a.data.size(); ++p) n += (a.data[p] && b.data[p]);
    return n;
}

json shape_to_json(const ShapeInstance& s, const Box& box) {
    return json{{"class_id", s.class_id},
                {"shape_kind", shape_kind_name(s.kind)},
                {"center", {s.cx, s.cy}},
                {"radii", {s.rx, s.ry}},
                {"rotation", s.rotation},
                {"z_order", s.z_order},
                {"fill", {s.fill[0], s.fill[1], s.fill[2]}},
                {"box", {box.x1, box.y1, box.x2, box.y2}}};
}

ShapeInstance shape_from_json(const json& j) {
    ShapeInstance s;
    s.class_id = j.at("class_id").get<int>();
    s.kind = shape_kind_from_name(j.at("shape_kind").get<std::string>());
    s.cx = j.at("center")[0].get<double>();
    s.cy = j.at("center")[1].get<double>();
    s.rx = j.at("radii")[0].get<double>();
    s.ry = j.at("radii")[1].get<double>();
    s.rotation = j.at("rotation").get<double>();
    s.z_order = j.at("z_order").get<int>();
    for (int c = 0; c < 3; ++c) s.fill[c] = j.at("fill")[c].get<double>();
    return s;
}

json config_to_json(const DatasetConfig& c) {
    return json{{"num_scenes", c.num_scenes},
                {"image_size", c.image_size},
                {"min_instances", c.min_instances},
                {"max_instances", c.max_instances},
                {"num_thing_classes", c.num_thing_classes},
                {"num_stuff_classes", c.num_stuff_classes},
                {"occlusion_prob", c.occlusion_prob},
                {"identical_pair_prob", c.identical_pair_prob},
                {"rng_seed", c.rng_seed}};
}

DatasetConfig config_from_json(const json& j) {
    DatasetConfig c;
    c.num_scenes = j.at("num_scenes").get<int>();
    c.image_size = j.at("image_size").get<int>();
    c.min_instances = j.at("min_instances").get<int>();
    c.max_instances = j.at("max_instances").get<int>();
    c.num_thing_classes = j.at("num_thing_classes").get<int>();
    c.num_stuff_classes = j.at("num_stuff_classes").get<int>();
    c.occlusion_prob = j.at("occlusion_prob").get<double>();
    c.identical_pair_prob = j.at("identical_pair_prob").get<double>();
    c.rng_seed = j.at("rng_seed").get<uint64_t>();
    return c;
}

SceneAnnotation read_scene(const fs::path& scene_dir, const DatasetConfig& config) {
    const json annot = load_json_file((scene_dir / "annot.json").string());
    const int size = annot.at("image_size").get<int>();
    const int plane = size * size;

    SceneAnnotation scene;
    scene.num_stuff = annot.at("num_stuff").get<int>();
    scene.placement_failures = annot.at("placement_failures").get<int>();
    for (const auto& p : annot.at("pair_indices"))
        scene.pair_indices.push_back({p[0].get<int>(), p[1].get<int>()});

    const ImageU8 img = read_png_u8((scene_dir / "image.png").string());
    require(img.width == size && img.height == size && img.channels == 3, ErrorKind::data,
            "image size mismatch in " + (scene_dir / "image.png").string());
    scene.image = u8_to_image(img);

    const ImageU16 pan = read_png_u16((scene_dir / "panoptic.png").string());
    require(pan.width == size && pan.height == size, ErrorKind::data,
            "panoptic size mismatch in " + (scene_dir / "panoptic.png").string());
    scene.panoptic = pan.data;

    // Stuff labels are stored as [label, run, label, run, ...] in row-major order.
    const auto& runs = annot.at("stuff_label_runs");
    require(runs.size() % 2 == 0, ErrorKind::data,
            "malformed stuff_label_runs in " + (scene_dir / "annot.json").string());
    scene.stuff_label.reserve(plane);
    for (size_t i = 0; i < runs.size(); i += 2) {
        const int label = runs[i].get<int>();
        const int run = runs[i + 1].get<int>();
        require(label >= 1 && label <= scene.num_stuff && run > 0, ErrorKind::data,
                "invalid stuff label run in " + (scene_dir / "annot.json").string());
        scene.stuff_label.insert(scene.stuff_label.end(), run, static_cast<uint8_t>(label));
    }
    require(static_cast<int>(scene.stuff_label.size()) == plane, ErrorKind::data,
            "stuff label runs do not cover the image in " + (scene_dir / "annot.json").string());

    const auto& instances = annot.at("instances");
    for (size_t i = 0; i < instances.size(); ++i) {
        InstanceAnnotation inst;
        inst.shape = shape_from_json(instances[i]);
        const auto& b = instances[i].at("box");
        inst.tight_box = Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                             b[3].get<double>()};
        const std::string mask_path = (scene_dir / ("inst_" + std::to_string(i) + ".png")).string();
        const ImageU8 m = read_png_u8(mask_path);
        require(m.width == size && m.height == size && m.channels == 1, ErrorKind::data,
                "mask size mismatch in " + mask_path);
        inst.full_mask = BinaryMask(size, size);
        for (int p = 0; p < plane; ++p) {
            require(m.data[p] == 0 || m.data[p] == 255, ErrorKind::data,
                    "mask is not binary in " + mask_path);
            inst.full_mask.data[p] = m.data[p] ? 1 : 0;
        }
        // Visible masks are implied by the panoptic id map, not stored.
        inst.visible_mask = BinaryMask(size, size);
        const uint16_t id = static_cast<uint16_t>(scene.instance_panoptic_id(static_cast<int>(i)));
        for (int p = 0; p < plane; ++p) inst.visible_mask.data[p] = scene.panoptic[p] == id;
        scene.instances.push_back(std::move(inst));
    }
    (void)config;
    return scene;
}

}  // namespace

const char* shape_kind_name(ShapeKind kind) {
    switch (kind) {
        case ShapeKind::ellipse: return "ellipse";
        case ShapeKind::rectangle: return "rectangle";
        case ShapeKind::triangle: return "triangle";
    }
    return "?";
}

ShapeKind shape_kind_from_name(const std::string& name) {
    if (name == "ellipse") return ShapeKind::ellipse;
    if (name == "rectangle") return ShapeKind::rectangle;
    if (name == "triangle") return ShapeKind::triangle;
    throw Error(ErrorKind::data, "unknown shape kind: " + name);
}

ShapeKind shape_kind_for_class(int class_id) {
    require(class_id >= 1, ErrorKind::usage, "class ids start at 1");
    return static_cast<ShapeKind>((class_id - 1) % 3);
}

void validate(const DatasetConfig& c) {
    require(c.num_scenes >= 0, ErrorKind::usage, "num_scenes must be non-negative");
    require(c.image_size > 0 && c.image_size % 32 == 0, ErrorKind::usage,
            "image_size must be a positive multiple of 32");
    require(c.min_instances >= 1 && c.min_instances <= c.max_instances, ErrorKind::usage,
            "instance count range must satisfy 1 <= min <= max");
    require(c.num_thing_classes >= 1, ErrorKind::usage, "need at least one thing class");
    require(c.num_stuff_classes >= 1, ErrorKind::usage, "need at least one stuff class");
    require(c.occlusion_prob >= 0.0 && c.occlusion_prob <= 1.0, ErrorKind::usage,
            "occlusion_prob must be in [0,1]");
    require(c.identical_pair_prob >= 0.0 && c.identical_pair_prob <= 1.0, ErrorKind::usage,
            "identical_pair_prob must be in [0,1]");
}

BinaryMask rasterize(const ShapeInstance& shape, int image_size, bool* degenerate) {
    require(image_size > 0, ErrorKind::usage, "image_size must be positive");
    if (degenerate) *degenerate = false;
    BinaryMask mask(image_size, image_size);
    if (shape.rx <= 0.0 || shape.ry <= 0.0) {
        if (degenerate) *degenerate = true;
        return mask;
    }
    const double c = std::cos(shape.rotation), s = std::sin(shape.rotation);
    for (int y = 0; y < image_size; ++y) {
        for (int x = 0; x < image_size; ++x) {
            const double dx = (x + 0.5) - shape.cx;
            const double dy = (y + 0.5) - shape.cy;
            // rotate the pixel center back into the shape's own frame
            const double lx = c * dx + s * dy;
            const double ly = -s * dx + c * dy;
            if (point_in_base_shape(shape.kind, lx, ly, shape.rx, shape.ry)) mask.at(y, x) = 1;
        }
    }
    return mask;
}

SceneAnnotation generate_scene(const DatasetConfig& config, int scene_index) {
    validate(config);
    require(scene_index >= 0, ErrorKind::usage, "scene_index must be non-negative");
    Rng rng(Rng::mix(config.rng_seed, static_cast<uint64_t>(scene_index)));
    const int size = config.image_size;
    const int plane = size * size;

    SceneAnnotation scene;
    scene.num_stuff = config.num_stuff_classes;
    scene.image = FeatureMap(3, size, size, 1);
    scene.stuff_label.resize(plane);
    scene.panoptic.resize(plane);

    // Stuff partition: nearest of S random sites, ties to the lower class id.
    std::vector<std::array<double, 2>> sites(config.num_stuff_classes);
    for (auto& site : sites) {
        site[0] = rng.uniform(0.0, size);
        site[1] = rng.uniform(0.0, size);
    }
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            int best = 0;
            double best_d = 1e300;
            for (size_t s = 0; s < sites.size(); ++s) {
                const double dx = (x + 0.5) - sites[s][0];
                const double dy = (y + 0.5) - sites[s][1];
                const double d = dx * dx + dy * dy;
                if (d < best_d) {
                    best_d = d;
                    best = static_cast<int>(s);
                }
            }
            scene.stuff_label[y * size + x] = static_cast<uint8_t>(best + 1);
        }

    // Background colors with light per-pixel texture noise.
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const auto& base = kStuffPalette[(scene.stuff_label[y * size + x] - 1) % 6];
            for (int c = 0; c < 3; ++c)
                scene.image.at(c, y, x) = std::clamp(base[c] + rng.uniform(-0.03, 0.03), 0.0, 1.0);
        }

    const int target = rng.uniform_int(config.min_instances, config.max_instances);
    bool want_pair = target >= 2 && rng.bernoulli(config.identical_pair_prob);

    const double margin = 4.0;
    auto sample_shape = [&](int z) {
        ShapeInstance s;
        s.class_id = rng.uniform_int(1, config.num_thing_classes);
        s.kind = shape_kind_for_class(s.class_id);
        s.rx = rng.uniform(3.0, size / 4.0);
        s.ry = rng.uniform(3.0, size / 4.0);
        s.rotation = rng.uniform(0.0, kPi);
        const auto& base = kThingPalette[(s.class_id - 1) % 6];
        for (int c = 0; c < 3; ++c)
            s.fill[c] = std::clamp(base[c] + rng.uniform(-0.12, 0.12), 0.05, 1.0);
        s.z_order = z;
        return s;
    };
    auto free_center = [&](ShapeInstance& s) {
        s.cx = rng.uniform(margin, size - margin);
        s.cy = rng.uniform(margin, size - margin);
    };
    auto near_center = [&](const ShapeInstance& anchor, ShapeInstance& s) {
        s.cx = std::clamp(anchor.cx + rng.uniform(-0.7, 0.7) * (anchor.rx + s.rx), margin,
                          size - margin);
        s.cy = std::clamp(anchor.cy + rng.uniform(-0.7, 0.7) * (anchor.ry + s.ry), margin,
                          size - margin);
    };

    std::vector<Placed> placed;

    // The identical-appearance pair occupies the first two slots: two shapes
    // with the same class, size, rotation and fill, forced to overlap.
    if (want_pair) {
        bool ok = false;
        for (int attempt = 0; attempt < kPlacementRetries && !ok; ++attempt) {
            ShapeInstance a = sample_shape(0);
            free_center(a);
            ShapeInstance b = a;
            b.z_order = 1;
            near_center(a, b);
            BinaryMask fa = rasterize(a, size);
            BinaryMask fb = rasterize(b, size);
            if (overlap_area(fa, fb) < 4) continue;
            std::vector<Placed> tentative;
            tentative.push_back({a, std::move(fa)});
            tentative.push_back({b, std::move(fb)});
            if (!visible_areas_ok(tentative, plane)) continue;
            placed = std::move(tentative);
            ok = true;
        }
        if (ok) {
            scene.pair_indices.push_back({0, 1});
        } else {
            ++scene.placement_failures;
        }
    }

    while (static_cast<int>(placed.size()) < target) {
        bool ok = false;
        for (int attempt = 0; attempt < kPlacementRetries && !ok; ++attempt) {
            ShapeInstance s = sample_shape(static_cast<int>(placed.size()));
            if (!placed.empty() && rng.bernoulli(config.occlusion_prob)) {
                const int anchor = rng.uniform_int(0, static_cast<int>(placed.size()) - 1);
                near_center(placed[anchor].shape, s);
            } else {
                free_center(s);
            }
            BinaryMask full = rasterize(s, size);
            placed.push_back({s, std::move(full)});
            if (visible_areas_ok(placed, plane)) {
                ok = true;
            } else {
                placed.pop_back();
            }
        }
        if (!ok) {
            ++scene.placement_failures;
            break;  // the scene simply has fewer instances
        }
    }

    // Paint things back-to-front with flat fills (identical-appearance pairs
    // must stay pixel-identical), then snap to the 8-bit grid so the PNG
    // round trip is exact.
    for (const Placed& p : placed)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                if (p.full.at(y, x))
                    for (int c = 0; c < 3; ++c) scene.image.at(c, y, x) = p.shape.fill[c];
    for (double& v : scene.image.data) v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;

    for (int p = 0; p < plane; ++p) scene.panoptic[p] = scene.stuff_label[p];
    for (size_t i = 0; i < placed.size(); ++i) {
        const uint16_t id = static_cast<uint16_t>(scene.instance_panoptic_id(static_cast<int>(i)));
        for (int p = 0; p < plane; ++p)
            if (placed[i].full.data[p]) scene.panoptic[p] = id;
    }

    for (size_t i = 0; i < placed.size(); ++i) {
        InstanceAnnotation inst;
        inst.shape = placed[i].shape;
        inst.tight_box = tight_box_of(placed[i].full);
        inst.visible_mask = BinaryMask(size, size);
        const uint16_t id = static_cast<uint16_t>(scene.instance_panoptic_id(static_cast<int>(i)));
        for (int p = 0; p < plane; ++p) inst.visible_mask.data[p] = scene.panoptic[p] == id;
        inst.full_mask = std::move(placed[i].full);
        scene.instances.push_back(std::move(inst));
    }
    return scene;
}

void write_dataset(const DatasetConfig& config, const std::vector<SceneAnnotation>& scenes,
                   const std::string& directory) {
    validate(config);
    fs::create_directories(directory);

    for (size_t k = 0; k < scenes.size(); ++k) {
        const SceneAnnotation& scene = scenes[k];
        const fs::path scene_dir = fs::path(directory) / ("scene_" + std::to_string(k));
        fs::create_directories(scene_dir);

        write_png_u8((scene_dir / "image.png").string(), image_to_u8(scene.image));

        ImageU16 pan(scene.width(), scene.height());
        pan.data = scene.panoptic;
        write_png_u16((scene_dir / "panoptic.png").string(), pan);

        json instances = json::array();
        for (size_t i = 0; i < scene.instances.size(); ++i) {
            const InstanceAnnotation& inst = scene.instances[i];
            instances.push_back(shape_to_json(inst.shape, inst.tight_box));
            ImageU8 m(scene.width(), scene.height(), 1);
            for (size_t p = 0; p < inst.full_mask.data.size(); ++p)
                m.data[p] = inst.full_mask.data[p] ? 255 : 0;
            write_png_u8((scene_dir / ("inst_" + std::to_string(i) + ".png")).string(), m);
        }

        json runs = json::array();
        size_t p = 0;
        while (p < scene.stuff_label.size()) {
            size_t q = p;
            while (q < scene.stuff_label.size() && scene.stuff_label[q] == scene.stuff_label[p])
                ++q;
            runs.push_back(static_cast<int>(scene.stuff_label[p]));
            runs.push_back(static_cast<int>(q - p));
            p = q;
        }

        json id_table = json::array();
        id_table.push_back({{"id", 0}, {"category", "void"}});
        for (int s = 1; s <= scene.num_stuff; ++s)
            id_table.push_back({{"id", s}, {"category", "stuff"}, {"class_id", s}});
        for (size_t i = 0; i < scene.instances.size(); ++i)
            id_table.push_back({{"id", scene.instance_panoptic_id(static_cast<int>(i))},
                                {"category", "thing"},
                                {"instance", static_cast<int>(i)},
                                {"class_id", scene.instances[i].shape.class_id}});

        json pairs = json::array();
        for (const auto& pr : scene.pair_indices) pairs.push_back({pr[0], pr[1]});

        save_json_file((scene_dir / "annot.json").string(),
                       json{{"image_size", scene.width()},
                            {"num_stuff", scene.num_stuff},
                            {"placement_failures", scene.placement_failures},
                            {"pair_indices", pairs},
                            {"stuff_label_runs", runs},
                            {"instances", instances},
                            {"id_table", id_table}});
    }

    // Manifest last, so a complete manifest implies complete scenes.
    save_json_file((fs::path(directory) / "manifest.json").string(),
                   json{{"format_version", "1"},
                        {"rng_algorithm", Rng::kAlgorithm},
                        {"seed", config.rng_seed},
                        {"num_scenes", scenes.size()},
                        {"config", config_to_json(config)}});
}

Dataset read_dataset(const std::string& directory) {
    const json manifest = load_json_file((fs::path(directory) / "manifest.json").string());
    require(manifest.at("format_version").get<std::string>() == "1", ErrorKind::data,
            "unsupported dataset format version in " + directory);
    require(manifest.at("rng_algorithm").get<std::string>() == Rng::kAlgorithm, ErrorKind::data,
            "dataset was generated with a different rng algorithm: " + directory);

    Dataset ds;
    ds.config = config_from_json(manifest.at("config"));
    const int n = manifest.at("num_scenes").get<int>();
    ds.scenes.reserve(n);
    for (int k = 0; k < n; ++k) {
        const fs::path scene_dir = fs::path(directory) / ("scene_" + std::to_string(k));
        try {
            ds.scenes.push_back(read_scene(scene_dir, ds.config));
        } catch (const Error& e) {
            throw Error(e.kind(), "scene_" + std::to_string(k) + ": " + e.what());
        }
    }
    return ds;
}

}  // namespace condinst
