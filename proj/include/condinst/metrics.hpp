#pragma once
// Evaluation metrics and the mask-head timing benchmark: mask overlap,
// COCO-style average precision over a sweep of mask-IoU thresholds, panoptic
// quality (PQ = SQ * RQ), and wall-clock scaling of the dynamic mask heads
// with the number of instances.

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "condinst/feature_map.hpp"
#include "condinst/inference.hpp"
#include "condinst/model.hpp"

namespace condinst {

/// Intersection-over-union of two binary masks of one shape. Two empty masks
/// count as a perfect match (IoU 1) and set the flag.
double mask_iou(const BinaryMask& a, const BinaryMask& b, bool* both_empty = nullptr);

// ---- average precision -----------------------------------------------------

struct MaskPrediction {
    int image = 0;
    int cls = 0;
    double score = 0;
    BinaryMask mask;
};

struct MaskGroundTruth {
    int image = 0;
    int cls = 0;
    BinaryMask mask;
};

struct APReport {
    double ap = 0;    // mean over thresholds and classes with ground truth
    double ap50 = 0;  // at IoU 0.50 (0 if that threshold is not evaluated)
    double ap75 = 0;
    std::map<int, double> per_class;
    int num_gt = 0;
    int num_predictions = 0;
};

/// The usual 0.50:0.05:0.95 sweep (ten thresholds).
std::vector<double> default_iou_thresholds();

/// Greedy matching per class and threshold: predictions by descending score,
/// each taking the highest-IoU unmatched ground truth of its class and image
/// at or above the threshold. Precision is 101-point interpolated; classes
/// without ground truth are skipped.
APReport evaluate_ap(const std::vector<MaskPrediction>& predictions,
                     const std::vector<MaskGroundTruth>& ground_truths,
                     const std::vector<double>& iou_thresholds = default_iou_thresholds());

nlohmann::json ap_report_to_json(const APReport& report);

// ---- panoptic quality ------------------------------------------------------

struct PQClassStat {
    int tp = 0, fp = 0, fn = 0;
    double iou_sum = 0;
    double pq = 0, sq = 0, rq = 0;
};

struct PQReport {
    double pq = 0, sq = 0, rq = 0;  // averaged over classes that occur
    std::map<int, PQClassStat> per_class;
};

/// Segments match iff same category and IoU > 0.5 (such a match is unique).
/// PQ per class = sum of matched IoUs / (TP + FP/2 + FN/2); void segments
/// (category 0) take no part.
PQReport evaluate_pq(const PanopticMap& pred, const PanopticMap& gt);

nlohmann::json pq_report_to_json(const PQReport& report);

// ---- mask-head timing ------------------------------------------------------

struct TimingRow {
    int k = 0;
    double median_ms = 0, p10_ms = 0, p90_ms = 0;
    int inner = 1;  // stage executions per timed sample (auto-raised on fast machines)
};

struct TimingReport {
    std::vector<TimingRow> rows;      // one per requested K
    double total_inference_ms = 0;    // median full-pipeline time on a matched image
    double mask_head_share = 0;       // largest-K median over the total
    int repeats = 0;
};

/// Times the mask-head stage for K synthetic instances over a fixed bottom
/// fixture: parameter unpack plus the fused coordinate / 1x1-chain / sigmoid /
/// upsampling pass shared with inference; the final resize to input
/// resolution is excluded. Strictly single-threaded; warm-up runs are
/// discarded, and the stage is repeated within one sample until the timer can
/// resolve it.
TimingReport bench_mask_head(Model& model, const FeatureMap& bottom,
                             const std::vector<int>& k_values = {1, 10, 100}, int repeats = 9);

/// `k,median_ms,p10_ms,p90_ms` rows, one per K.
void write_timings_csv(const std::string& path, const TimingReport& report);

}  // namespace condinst
