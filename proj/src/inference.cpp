#include "condinst/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <thread>

#include "condinst/json_util.hpp"
#include "condinst/metrics.hpp"
#include "condinst/ops.hpp"
#include "condinst/png_io.hpp"

namespace condinst {

namespace {

// Deterministic processing order: best score first, position in the incoming
// list as the tie-breaker.
template <typename T>
std::vector<int> score_order(const std::vector<T>& items) {
    std::vector<int> order(items.size());
    for (size_t i = 0; i < items.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (items[a].score != items[b].score) return items[a].score > items[b].score;
        return a < b;
    });
    return order;
}

}  // namespace

void validate(const InferenceOptions& options) {
    require(options.score_threshold >= 0.0 && options.score_threshold <= 1.0, ErrorKind::usage,
            "score_threshold must be in [0,1]");
    require(options.pre_nms_topk > 0, ErrorKind::usage, "pre_nms_topk must be positive");
    require(options.box_nms_iou > 0.0 && options.box_nms_iou <= 1.0, ErrorKind::usage,
            "box_nms_iou must be in (0,1]");
    require(options.mask_nms_iou > 0.0 && options.mask_nms_iou <= 1.0, ErrorKind::usage,
            "mask_nms_iou must be in (0,1]");
    require(options.keep_top > 0, ErrorKind::usage, "keep_top must be positive");
    require(options.mask_threshold > 0.0 && options.mask_threshold < 1.0, ErrorKind::usage,
            "mask_threshold must be in (0,1)");
    require(options.panoptic_score_min >= 0.0 && options.panoptic_score_min <= 1.0,
            ErrorKind::usage, "panoptic_score_min must be in [0,1]");
    require(options.panoptic_max_loss >= 0.0 && options.panoptic_max_loss < 1.0, ErrorKind::usage,
            "panoptic_max_loss must be in [0,1)");
}

std::vector<Detection> decode_detections(const Model& model, const ModelOutputs& outputs,
                                         const InferenceOptions& options) {
    validate(options);
    const ModelConfig& config = model.config();
    const int n_params = num_filter_params(config);
    const double* static_theta = nullptr;
    if (config.static_mask_head) {
        const ParamStore::Segment* seg = model.params().find("static_head.theta");
        require(seg && static_cast<int>(seg->size) == n_params, ErrorKind::data,
                "static mask-head parameters missing from the store");
        static_theta = model.params().values() + seg->offset;
    }

    std::vector<Detection> all;
    for (const auto& [level, head] : outputs.heads) {
        const FeatureMap& cls = head.cls->value;
        const FeatureMap& ctr = head.ctr->value;
        const FeatureMap& box = head.box->value;
        require(cls.channels == config.num_classes, ErrorKind::data,
                "class logits have the wrong channel count");
        const int stride = config.stride_of_level(level);

        std::vector<Detection> level_dets;
        for (int y = 0; y < cls.height; ++y) {
            for (int x = 0; x < cls.width; ++x) {
                int best_cls = 1;
                double best_logit = cls.at(0, y, x);
                for (int c = 1; c < cls.channels; ++c) {
                    if (cls.at(c, y, x) > best_logit) {
                        best_logit = cls.at(c, y, x);
                        best_cls = c + 1;
                    }
                }
                const double cls_prob = sigmoid(best_logit);
                const double ctr_prob = sigmoid(ctr.at(0, y, x));
                const double score = std::sqrt(cls_prob * ctr_prob);
                if (score <= options.score_threshold) continue;

                Detection det;
                det.cls = best_cls;
                det.score = score;
                det.cls_prob = cls_prob;
                det.ctr_prob = ctr_prob;
                det.level = level;
                det.x = x;
                det.y = y;
                det.px = map_cell_to_input(x, stride);
                det.py = map_cell_to_input(y, stride);
                const double l = std::exp(box.at(0, y, x)) * stride;
                const double t = std::exp(box.at(1, y, x)) * stride;
                const double r = std::exp(box.at(2, y, x)) * stride;
                const double b = std::exp(box.at(3, y, x)) * stride;
                det.box = Box{det.px - l, det.py - t, det.px + r, det.py + b};
                if (static_theta) {
                    det.theta.assign(static_theta, static_theta + n_params);
                } else {
                    const FeatureMap& controller = head.controller->value;
                    require(controller.channels == n_params, ErrorKind::data,
                            "controller output has the wrong channel count");
                    det.theta.resize(n_params);
                    for (int c = 0; c < n_params; ++c) det.theta[c] = controller.at(c, y, x);
                }
                level_dets.push_back(std::move(det));
            }
        }

        std::vector<int> order = score_order(level_dets);
        const int keep = std::min<int>(options.pre_nms_topk, static_cast<int>(order.size()));
        std::sort(order.begin(), order.begin() + keep);  // restore scan order within the cut
        for (int i = 0; i < keep; ++i) all.push_back(std::move(level_dets[order[i]]));
    }
    return all;
}

std::vector<Detection> box_nms(std::vector<Detection> detections, double iou_threshold,
                               int keep_top, InferenceStats* stats) {
    if (stats) stats->box_head_consulted = true;
    std::vector<int> order = score_order(detections);
    std::vector<bool> suppressed(detections.size(), false);
    std::vector<Detection> kept;
    for (size_t i = 0; i < order.size(); ++i) {
        if (suppressed[order[i]]) continue;
        const Detection& winner = detections[order[i]];
        for (size_t j = i + 1; j < order.size(); ++j) {
            if (suppressed[order[j]]) continue;
            const Detection& other = detections[order[j]];
            if (other.cls != winner.cls) continue;
            if (box_iou(winner.box, other.box) > iou_threshold) suppressed[order[j]] = true;
        }
        kept.push_back(winner);
        if (static_cast<int>(kept.size()) >= keep_top) break;
    }
    return kept;
}

std::vector<InstanceResult> compute_masks(const std::vector<Detection>& detections,
                                          const FeatureMap& bottom, const ModelConfig& config,
                                          int image_height, int image_width, double mask_threshold,
                                          InferenceStats* stats, int threads) {
    require(bottom.channels == config.c_bottom, ErrorKind::data,
            "bottom features have the wrong channel count");
    require(image_height > 0 && image_width > 0, ErrorKind::usage,
            "image size must be positive");
    for (const Detection& det : detections)
        require(static_cast<int>(det.theta.size()) == num_filter_params(config), ErrorKind::data,
                "detection carries a mask-parameter vector of the wrong length");

    std::vector<InstanceResult> results(detections.size());
    auto one = [&](size_t i, MaskStageScratch& scratch) {
        const Detection& det = detections[i];
        const FeatureMap& up =
            run_mask_stage(config, bottom, det.px, det.py, det.theta, scratch);
        InstanceResult& res = results[i];
        res.cls = det.cls;
        res.score = det.score;
        res.source_index = static_cast<int>(i);
        res.soft = bilinear_resize(up, image_height, image_width);
        res.binary = BinaryMask(image_height, image_width);
        for (size_t p = 0; p < res.soft.data.size(); ++p) {
            if (res.soft.data[p] >= mask_threshold) {
                res.binary.data[p] = 1;
                ++res.area;
            }
        }
        res.empty_after_threshold = res.area == 0;
    };

    // Instances never touch shared state, so a contiguous split over plain
    // threads is race-free and count-independent. Scratch buffers are
    // per-worker, never shared.
    const int workers =
        std::max(1, std::min<int>(threads, static_cast<int>(detections.size())));
    if (workers <= 1) {
        MaskStageScratch scratch;
        for (size_t i = 0; i < detections.size(); ++i) one(i, scratch);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> failures(workers);
        for (int w = 0; w < workers; ++w) {
            const size_t begin = detections.size() * w / workers;
            const size_t end = detections.size() * (w + 1) / workers;
            pool.emplace_back([&, w, begin, end] {
                try {
                    MaskStageScratch scratch;
                    for (size_t i = begin; i < end; ++i) one(i, scratch);
                } catch (...) {
                    failures[w] = std::current_exception();
                }
            });
        }
        for (std::thread& t : pool) t.join();
        for (const std::exception_ptr& e : failures)
            if (e) std::rethrow_exception(e);
    }

    if (stats) {
        for (const InstanceResult& res : results)
            if (res.empty_after_threshold) stats->any_empty_mask = true;
    }
    return results;
}

int thread_count_from_env() {
    const char* v = std::getenv("CONDINST_THREADS");
    if (!v) return 1;
    const int n = std::atoi(v);
    return n > 0 ? n : 1;
}

std::vector<InstanceResult> mask_nms(std::vector<InstanceResult> results, double iou_threshold,
                                     int keep_top) {
    std::vector<int> order = score_order(results);
    std::vector<bool> suppressed(results.size(), false);
    std::vector<InstanceResult> kept;
    for (size_t i = 0; i < order.size(); ++i) {
        if (suppressed[order[i]]) continue;
        const InstanceResult& winner = results[order[i]];
        for (size_t j = i + 1; j < order.size(); ++j) {
            if (suppressed[order[j]]) continue;
            const InstanceResult& other = results[order[j]];
            if (other.cls != winner.cls) continue;
            if (mask_iou(winner.binary, other.binary) > iou_threshold)
                suppressed[order[j]] = true;
        }
        kept.push_back(winner);
        if (static_cast<int>(kept.size()) >= keep_top) break;
    }
    return kept;
}

std::vector<int> semantic_argmax(const FeatureMap& semantic_logits, int out_height,
                                 int out_width) {
    require(semantic_logits.channels > 0, ErrorKind::data, "semantic logits have no channels");
    const FeatureMap resized = bilinear_resize(semantic_logits, out_height, out_width);
    std::vector<int> labels(static_cast<size_t>(out_height) * out_width, 1);
    for (int y = 0; y < out_height; ++y) {
        for (int x = 0; x < out_width; ++x) {
            int best = 0;
            for (int c = 1; c < resized.channels; ++c) {
                if (resized.at(c, y, x) > resized.at(best, y, x)) best = c;
            }
            labels[static_cast<size_t>(y) * out_width + x] = best + 1;
        }
    }
    return labels;
}

PanopticMap panoptic_merge(const std::vector<InstanceResult>& instances,
                           const std::vector<int>& semantic_labels, int num_stuff, int height,
                           int width, double score_min, double max_loss) {
    const size_t pixels = static_cast<size_t>(height) * width;
    require(semantic_labels.size() == pixels, ErrorKind::usage,
            "semantic label map does not match the requested size");
    require(num_stuff >= 0, ErrorKind::usage, "stuff class count must be non-negative");

    PanopticMap map;
    map.height = height;
    map.width = width;
    map.ids.assign(pixels, 0);

    // Instances claim pixels in score order; a claim only sticks on pixels no
    // better-scoring instance took. An instance that loses more than the
    // allowed fraction of its pixels that way is dropped entirely. The
    // comparison is exact at the 0.40 default: losing exactly 40% keeps.
    std::vector<PanopticSegment> things;
    std::vector<int> order = score_order(instances);
    for (int idx : order) {
        const InstanceResult& inst = instances[idx];
        if (inst.score < score_min) continue;
        require(inst.binary.height == height && inst.binary.width == width, ErrorKind::usage,
                "instance mask does not match the panoptic size");
        size_t total = 0, lost = 0;
        for (size_t p = 0; p < pixels; ++p) {
            if (!inst.binary.data[p]) continue;
            ++total;
            if (map.ids[p] != 0) ++lost;
        }
        if (total == 0) continue;
        if (static_cast<double>(lost) > max_loss * static_cast<double>(total)) continue;

        const int id = num_stuff + 1 + static_cast<int>(things.size());
        require(id <= 65535, ErrorKind::data, "too many panoptic segments for 16-bit ids");
        for (size_t p = 0; p < pixels; ++p) {
            if (inst.binary.data[p] && map.ids[p] == 0) map.ids[p] = static_cast<uint16_t>(id);
        }
        PanopticSegment seg;
        seg.id = id;
        seg.category = num_stuff + inst.cls;
        seg.is_thing = true;
        seg.instance_index = idx;
        seg.score = inst.score;
        seg.area = total - lost;
        things.push_back(seg);
    }

    // Unclaimed pixels fall back to the semantic map: stuff labels fill in
    // directly, thing labels without a surviving instance become void (id 0).
    std::vector<size_t> stuff_area(static_cast<size_t>(num_stuff) + 1, 0);
    size_t void_area = 0;
    for (size_t p = 0; p < pixels; ++p) {
        if (map.ids[p] != 0) continue;
        const int label = semantic_labels[p];
        require(label >= 1, ErrorKind::data, "semantic labels must be 1-based");
        if (label <= num_stuff) {
            map.ids[p] = static_cast<uint16_t>(label);
            ++stuff_area[label];
        } else {
            ++void_area;  // id stays 0
        }
    }

    if (void_area > 0) {
        PanopticSegment seg;
        seg.id = 0;
        seg.category = 0;
        seg.area = void_area;
        map.segments.push_back(seg);
    }
    for (int label = 1; label <= num_stuff; ++label) {
        if (stuff_area[label] == 0) continue;
        PanopticSegment seg;
        seg.id = label;
        seg.category = label;
        seg.area = stuff_area[label];
        map.segments.push_back(seg);
    }
    map.segments.insert(map.segments.end(), things.begin(), things.end());
    return map;
}

InferenceResult run_inference(Model& model, const FeatureMap& image,
                              const InferenceOptions& options) {
    validate(options);
    Tape tape(false);
    ModelOutputs outputs = model.forward(tape, image);

    InferenceResult result;
    std::vector<Detection> candidates = decode_detections(model, outputs, options);
    result.stats.decoded = static_cast<int>(candidates.size());

    if (options.use_mask_nms) {
        // Every candidate gets a mask; overlap on masks decides survival. The
        // box head plays no part past decoding (stats record that).
        std::vector<InstanceResult> all =
            compute_masks(candidates, outputs.bottom->value, model.config(), image.height,
                          image.width, options.mask_threshold, &result.stats,
                          thread_count_from_env());
        result.instances = mask_nms(std::move(all), options.mask_nms_iou, options.keep_top);
        for (const InstanceResult& inst : result.instances)
            result.detections.push_back(candidates[inst.source_index]);
    } else {
        result.detections =
            box_nms(std::move(candidates), options.box_nms_iou, options.keep_top, &result.stats);
        result.instances =
            compute_masks(result.detections, outputs.bottom->value, model.config(), image.height,
                          image.width, options.mask_threshold, &result.stats,
                          thread_count_from_env());
    }
    result.stats.after_nms = static_cast<int>(result.detections.size());

    if (options.with_panoptic) {
        std::vector<int> labels = semantic_argmax(outputs.semantic->value, image.height,
                                                  image.width);
        result.panoptic = panoptic_merge(result.instances, labels,
                                         model.config().num_stuff_classes, image.height,
                                         image.width, options.panoptic_score_min,
                                         options.panoptic_max_loss);
    }
    return result;
}

nlohmann::json rle_encode(const BinaryMask& mask) {
    std::vector<size_t> counts;
    size_t run = 0;
    uint8_t current = 0;  // runs alternate starting with background
    for (uint8_t v : mask.data) {
        const uint8_t bit = v ? 1 : 0;
        if (bit == current) {
            ++run;
        } else {
            counts.push_back(run);
            current = bit;
            run = 1;
        }
    }
    counts.push_back(run);
    return nlohmann::json{{"size", {mask.height, mask.width}}, {"counts", counts}};
}

BinaryMask rle_decode(const nlohmann::json& j) {
    require(j.contains("size") && j.contains("counts"), ErrorKind::data,
            "run-length mask needs 'size' and 'counts'");
    require(j["size"].is_array() && j["size"].size() == 2, ErrorKind::data,
            "run-length 'size' must be [height, width]");
    BinaryMask mask(j["size"][0].get<int>(), j["size"][1].get<int>());
    size_t pos = 0;
    uint8_t current = 0;
    for (const auto& c : j["counts"]) {
        const size_t run = c.get<size_t>();
        require(pos + run <= mask.data.size(), ErrorKind::data,
                "run-length counts overrun the mask size");
        std::fill(mask.data.begin() + pos, mask.data.begin() + pos + run, current);
        pos += run;
        current = 1 - current;
    }
    require(pos == mask.data.size(), ErrorKind::data,
            "run-length counts do not cover the mask");
    return mask;
}

void write_image_results(const std::string& directory, const std::string& stem,
                         const InferenceResult& result) {
    namespace fs = std::filesystem;
    fs::create_directories(directory);

    nlohmann::json dets = nlohmann::json::array();
    for (size_t i = 0; i < result.detections.size(); ++i) {
        const Detection& det = result.detections[i];
        nlohmann::json d{{"class", det.cls},
                         {"score", det.score},
                         {"box", {det.box.x1, det.box.y1, det.box.x2, det.box.y2}},
                         {"level", det.level}};
        if (i < result.instances.size()) {
            const InstanceResult& inst = result.instances[i];
            d["mask"] = rle_encode(inst.binary);
            d["area"] = inst.area;
            d["empty_after_threshold"] = inst.empty_after_threshold;
        }
        dets.push_back(std::move(d));
    }
    nlohmann::json top{
        {"mask_format", "row-major run lengths alternating background/foreground, background first"},
        {"detections", std::move(dets)}};
    save_json_file((fs::path(directory) / (stem + ".json")).string(), top);

    if (result.panoptic.height > 0) {
        const PanopticMap& pano = result.panoptic;
        ImageU16 ids(pano.width, pano.height);
        for (size_t p = 0; p < pano.ids.size(); ++p) ids.data[p] = pano.ids[p];
        write_png_u16((fs::path(directory) / (stem + "_panoptic.png")).string(), ids);

        nlohmann::json rows = nlohmann::json::array();
        for (const PanopticSegment& seg : pano.segments) {
            nlohmann::json r{{"id", seg.id},
                             {"category", seg.category},
                             {"is_thing", seg.is_thing},
                             {"area", seg.area}};
            if (seg.is_thing) {
                r["score"] = seg.score;
                r["instance_index"] = seg.instance_index;
            }
            rows.push_back(std::move(r));
        }
        save_json_file((fs::path(directory) / (stem + "_segments.json")).string(),
                       nlohmann::json{{"segments", std::move(rows)}});
    }
}

}  // namespace condinst
