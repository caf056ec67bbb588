#include "condinst/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include "condinst/ops.hpp"
#include "condinst/rng.hpp"

namespace condinst {

double mask_iou(const BinaryMask& a, const BinaryMask& b, bool* both_empty) {
    require(a.same_shape(b), ErrorKind::usage, "mask IoU needs equally shaped masks");
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const bool pa = a.data[i] != 0, pb = b.data[i] != 0;
        inter += pa && pb;
        uni += pa || pb;
    }
    if (both_empty) *both_empty = uni == 0;
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

// ---- average precision -----------------------------------------------------

std::vector<double> default_iou_thresholds() {
    std::vector<double> out;
    for (int i = 0; i < 10; ++i) out.push_back(0.50 + 0.05 * i);
    return out;
}

namespace {

// Area under the interpolated precision-recall curve, sampled at 101 evenly
// spaced recall points. tp_flags follow descending prediction score.
double interpolated_ap(const std::vector<bool>& tp_flags, int num_gt) {
    if (num_gt == 0) return 0.0;
    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (bool hit : tp_flags) {
        hit ? ++tp : ++fp;
        precision.push_back(static_cast<double>(tp) / (tp + fp));
        recall.push_back(static_cast<double>(tp) / num_gt);
    }
    double total = 0;
    for (int i = 0; i <= 100; ++i) {
        const double r = i / 100.0;
        double best = 0;
        for (size_t k = 0; k < precision.size(); ++k)
            if (recall[k] >= r) best = std::max(best, precision[k]);
        total += best;
    }
    return total / 101.0;
}

}  // namespace

APReport evaluate_ap(const std::vector<MaskPrediction>& predictions,
                     const std::vector<MaskGroundTruth>& ground_truths,
                     const std::vector<double>& iou_thresholds) {
    require(!iou_thresholds.empty(), ErrorKind::usage, "need at least one IoU threshold");
    for (double t : iou_thresholds)
        require(t > 0.0 && t <= 1.0, ErrorKind::usage, "IoU thresholds must be in (0,1]");
    APReport report;
    report.num_gt = static_cast<int>(ground_truths.size());
    report.num_predictions = static_cast<int>(predictions.size());

    std::vector<int> classes;
    for (const MaskGroundTruth& gt : ground_truths) classes.push_back(gt.cls);
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    if (classes.empty()) return report;

    double ap50_total = 0, ap75_total = 0;
    for (int cls : classes) {
        std::vector<int> pred_idx;
        for (size_t i = 0; i < predictions.size(); ++i)
            if (predictions[i].cls == cls) pred_idx.push_back(static_cast<int>(i));
        std::stable_sort(pred_idx.begin(), pred_idx.end(), [&](int a, int b) {
            return predictions[a].score > predictions[b].score;
        });
        std::vector<int> gt_idx;
        for (size_t i = 0; i < ground_truths.size(); ++i)
            if (ground_truths[i].cls == cls) gt_idx.push_back(static_cast<int>(i));

        // IoU of every same-image prediction/ground-truth pair of this class.
        std::vector<std::vector<double>> iou(pred_idx.size(),
                                             std::vector<double>(gt_idx.size(), 0.0));
        for (size_t p = 0; p < pred_idx.size(); ++p) {
            for (size_t g = 0; g < gt_idx.size(); ++g) {
                const MaskPrediction& pred = predictions[pred_idx[p]];
                const MaskGroundTruth& gt = ground_truths[gt_idx[g]];
                if (pred.image != gt.image) continue;
                iou[p][g] = mask_iou(pred.mask, gt.mask);
            }
        }

        double class_total = 0;
        for (size_t t = 0; t < iou_thresholds.size(); ++t) {
            const double threshold = iou_thresholds[t];
            std::vector<bool> taken(gt_idx.size(), false);
            std::vector<bool> tp_flags;
            for (size_t p = 0; p < pred_idx.size(); ++p) {
                int best = -1;
                for (size_t g = 0; g < gt_idx.size(); ++g) {
                    if (taken[g] || iou[p][g] < threshold) continue;
                    if (best < 0 || iou[p][g] > iou[p][best]) best = static_cast<int>(g);
                }
                if (best >= 0) taken[best] = true;
                tp_flags.push_back(best >= 0);
            }
            const double ap_t = interpolated_ap(tp_flags, static_cast<int>(gt_idx.size()));
            class_total += ap_t;
            if (std::abs(threshold - 0.50) < 1e-9) ap50_total += ap_t;
            if (std::abs(threshold - 0.75) < 1e-9) ap75_total += ap_t;
        }
        report.per_class[cls] = class_total / iou_thresholds.size();
    }

    for (const auto& [cls, ap] : report.per_class) report.ap += ap;
    report.ap /= report.per_class.size();
    report.ap50 = ap50_total / report.per_class.size();
    report.ap75 = ap75_total / report.per_class.size();
    return report;
}

nlohmann::json ap_report_to_json(const APReport& report) {
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [cls, ap] : report.per_class) per_class[std::to_string(cls)] = ap;
    return nlohmann::json{{"ap", report.ap},
                          {"ap50", report.ap50},
                          {"ap75", report.ap75},
                          {"per_class", std::move(per_class)},
                          {"num_gt", report.num_gt},
                          {"num_predictions", report.num_predictions}};
}

// ---- panoptic quality ------------------------------------------------------

namespace {

struct SegmentView {
    int id = 0;
    int category = 0;
    size_t area = 0;
    bool matched = false;
};

std::vector<SegmentView> real_segments(const PanopticMap& map) {
    std::vector<SegmentView> out;
    for (const PanopticSegment& seg : map.segments) {
        if (seg.category == 0) continue;  // void takes no part in matching
        out.push_back({seg.id, seg.category, 0, false});
    }
    return out;
}

}  // namespace

PQReport evaluate_pq(const PanopticMap& pred, const PanopticMap& gt) {
    require(pred.height == gt.height && pred.width == gt.width, ErrorKind::usage,
            "panoptic quality needs equally sized maps");
    std::vector<SegmentView> pred_segs = real_segments(pred);
    std::vector<SegmentView> gt_segs = real_segments(gt);

    std::unordered_map<int, int> pred_of_id, gt_of_id;
    for (size_t i = 0; i < pred_segs.size(); ++i) pred_of_id[pred_segs[i].id] = static_cast<int>(i);
    for (size_t i = 0; i < gt_segs.size(); ++i) gt_of_id[gt_segs[i].id] = static_cast<int>(i);

    // One pass over the pixels: per-segment areas and the joint intersection
    // histogram keyed by (pred segment, gt segment).
    std::unordered_map<uint64_t, size_t> inter;
    for (size_t p = 0; p < pred.ids.size(); ++p) {
        const auto pi = pred_of_id.find(pred.ids[p]);
        const auto gi = gt_of_id.find(gt.ids[p]);
        if (pi != pred_of_id.end()) ++pred_segs[pi->second].area;
        if (gi != gt_of_id.end()) ++gt_segs[gi->second].area;
        if (pi != pred_of_id.end() && gi != gt_of_id.end())
            ++inter[(static_cast<uint64_t>(pi->second) << 32) | static_cast<uint64_t>(gi->second)];
    }

    PQReport report;
    for (const auto& [key, overlap] : inter) {
        SegmentView& ps = pred_segs[key >> 32];
        SegmentView& gs = gt_segs[key & 0xffffffff];
        if (ps.category != gs.category) continue;
        const double iou = static_cast<double>(overlap) /
                           static_cast<double>(ps.area + gs.area - overlap);
        if (iou <= 0.5) continue;  // IoU > 0.5 makes the match unique
        ps.matched = true;
        gs.matched = true;
        PQClassStat& stat = report.per_class[ps.category];
        ++stat.tp;
        stat.iou_sum += iou;
    }
    for (const SegmentView& seg : pred_segs)
        if (!seg.matched) ++report.per_class[seg.category].fp;
    for (const SegmentView& seg : gt_segs)
        if (!seg.matched) ++report.per_class[seg.category].fn;

    for (auto& [category, stat] : report.per_class) {
        const double denom = stat.tp + 0.5 * stat.fp + 0.5 * stat.fn;
        stat.pq = denom > 0 ? stat.iou_sum / denom : 0.0;
        stat.sq = stat.tp > 0 ? stat.iou_sum / stat.tp : 0.0;
        stat.rq = denom > 0 ? stat.tp / denom : 0.0;
        report.pq += stat.pq;
        report.sq += stat.sq;
        report.rq += stat.rq;
    }
    if (!report.per_class.empty()) {
        report.pq /= report.per_class.size();
        report.sq /= report.per_class.size();
        report.rq /= report.per_class.size();
    }
    return report;
}

nlohmann::json pq_report_to_json(const PQReport& report) {
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [category, stat] : report.per_class) {
        per_class[std::to_string(category)] = {{"pq", stat.pq},   {"sq", stat.sq},
                                               {"rq", stat.rq},   {"tp", stat.tp},
                                               {"fp", stat.fp},   {"fn", stat.fn}};
    }
    return nlohmann::json{{"pq", report.pq},
                          {"sq", report.sq},
                          {"rq", report.rq},
                          {"per_class", std::move(per_class)}};
}

// ---- mask-head timing ------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

double percentile(std::vector<double> samples, double q) {
    std::sort(samples.begin(), samples.end());
    const size_t idx = static_cast<size_t>(
        std::lround(q * static_cast<double>(samples.size() - 1)));
    return samples[idx];
}

// The benchmarked stage for one instance, matching the inference path up to
// (and excluding) the resize to input resolution.
void mask_stage(const ModelConfig& config, const FeatureMap& bottom, const Detection& det,
                MaskStageScratch& scratch) {
    const FeatureMap& probs =
        run_mask_stage(config, bottom, det.px, det.py, det.theta, scratch);
    volatile double sink = probs.data[0];
    (void)sink;
}

}  // namespace

TimingReport bench_mask_head(Model& model, const FeatureMap& bottom,
                             const std::vector<int>& k_values, int repeats) {
    const ModelConfig& config = model.config();
    require(bottom.channels == config.c_bottom, ErrorKind::usage,
            "bottom fixture must have c_bottom channels");
    require(repeats >= 3, ErrorKind::usage, "need at least 3 timing repeats");

    TimingReport report;
    report.repeats = repeats;

    // Deterministic synthetic detections spread over the map.
    Rng rng(2024);
    const int stride = config.bottom_stride();
    auto make_instances = [&](int k) {
        std::vector<Detection> dets(k);
        for (Detection& det : dets) {
            det.px = map_cell_to_input(static_cast<int>(rng.uniform_int(0, bottom.width - 1)),
                                       stride);
            det.py = map_cell_to_input(static_cast<int>(rng.uniform_int(0, bottom.height - 1)),
                                       stride);
            det.theta.resize(num_filter_params(config));
            for (double& v : det.theta) v = rng.normal(0.0, 0.1);
        }
        return dets;
    };

    for (int k : k_values) {
        require(k >= 0, ErrorKind::usage, "instance counts must be non-negative");
        const std::vector<Detection> dets = make_instances(k);
        MaskStageScratch scratch;
        auto run_stage = [&] {
            for (const Detection& det : dets) mask_stage(config, bottom, det, scratch);
        };
        run_stage();  // warm-up, discarded
        run_stage();

        // Batch the stage until one sample is comfortably above the timer's
        // resolution, then collect the requested number of samples.
        int inner = 1;
        for (;;) {
            const auto start = Clock::now();
            for (int i = 0; i < inner; ++i) run_stage();
            if (seconds_since(start) >= 1e-4 || inner >= (1 << 20)) break;
            inner *= 2;
        }
        std::vector<double> samples;
        for (int r = 0; r < repeats; ++r) {
            const auto start = Clock::now();
            for (int i = 0; i < inner; ++i) run_stage();
            samples.push_back(seconds_since(start) / inner * 1e3);
        }
        TimingRow row;
        row.k = k;
        row.inner = inner;
        row.median_ms = percentile(samples, 0.5);
        row.p10_ms = percentile(samples, 0.1);
        row.p90_ms = percentile(samples, 0.9);
        report.rows.push_back(row);
    }

    // Whole-pipeline reference on an image matched to the fixture, for the
    // mask-head share. The share uses the largest positive K.
    FeatureMap image(3, bottom.height * stride, bottom.width * stride, 1);
    for (double& v : image.data) v = rng.uniform01();
    std::vector<double> totals;
    for (int r = 0; r < std::min(repeats, 3); ++r) {
        const auto start = Clock::now();
        run_inference(model, image, {});
        totals.push_back(seconds_since(start) * 1e3);
    }
    report.total_inference_ms = percentile(totals, 0.5);

    const TimingRow* largest = nullptr;
    for (const TimingRow& row : report.rows)
        if (row.k > 0 && (!largest || row.k > largest->k)) largest = &row;
    if (largest && report.total_inference_ms > 0)
        report.mask_head_share = largest->median_ms / report.total_inference_ms;
    return report;
}

void write_timings_csv(const std::string& path, const TimingReport& report) {
    std::ofstream out(path);
    require(out.good(), ErrorKind::data, "cannot open for writing: " + path);
    out << "k,median_ms,p10_ms,p90_ms\n";
    for (const TimingRow& row : report.rows)
        out << row.k << "," << row.median_ms << "," << row.p10_ms << "," << row.p90_ms << "\n";
    out.flush();
    require(out.good(), ErrorKind::data, "write failed: " + path);
}

}  // namespace condinst
