#pragma once
// Test-time pipeline: decode per-location detections from the head outputs,
// suppress duplicates with box- or mask-based NMS, run each survivor's private
// mask head over the shared bottom features, and stitch the panoptic map.
//
// The mask-NMS path computes masks for every decoded candidate and never
// consults the box head after decoding; an instrumentation flag records
// whether boxes were used so the two pipelines stay honestly separated.

#include <string>
#include <vector>

#include <json.hpp>

#include "condinst/feature_map.hpp"
#include "condinst/model.hpp"

namespace condinst {

struct InferenceOptions {
    double score_threshold = 0.05;  // floor on sqrt(cls_prob * ctr_prob)
    int pre_nms_topk = 1000;        // per level, bounds the mask-NMS workload
    double box_nms_iou = 0.6;
    double mask_nms_iou = 0.6;
    int keep_top = 100;        // survivors that get masks (box path) / are kept
    bool use_mask_nms = false;  // suppress on mask overlap instead of boxes
    double mask_threshold = 0.5;
    bool with_panoptic = true;
    double panoptic_score_min = 0.45;
    double panoptic_max_loss = 0.40;  // discard when losing more than this fraction
};
void validate(const InferenceOptions& options);

struct Detection {
    int cls = 0;  // 1..C
    double score = 0;
    double cls_prob = 0, ctr_prob = 0;
    Box box;
    int level = 0, x = 0, y = 0;  // generator cell
    int px = 0, py = 0;           // its input-space point
    std::vector<double> theta;    // this location's mask-head parameters
};

struct InstanceResult {
    int cls = 0;
    double score = 0;
    int source_index = -1;  // position in the detection list handed to compute_masks
    FeatureMap soft;        // input-resolution probabilities
    BinaryMask binary;      // soft >= threshold
    size_t area = 0;
    bool empty_after_threshold = false;
};

struct PanopticSegment {
    int id = 0;        // value in the id map; 0 = void
    int category = 0;  // 1..S stuff, S + class for things, 0 = void
    bool is_thing = false;
    int instance_index = -1;  // index into the merged instance list
    double score = 0;         // things only
    size_t area = 0;
};

struct PanopticMap {
    int height = 0, width = 0;
    std::vector<uint16_t> ids;  // row-major segment ids
    std::vector<PanopticSegment> segments;
};

struct InferenceStats {
    int decoded = 0;
    int after_nms = 0;
    bool box_head_consulted = false;
    bool any_empty_mask = false;
};

/// Per-location decoding: best class by sigmoid probability, combined score
/// sqrt(cls*ctr) over the threshold, box reconstructed from exp(raw)*stride
/// distances around the mapped point, theta copied from the controller map
/// (or the shared static vector). Keeps the per-level top-k by score.
std::vector<Detection> decode_detections(const Model& model, const ModelOutputs& outputs,
                                         const InferenceOptions& options);

/// Greedy class-wise NMS on box IoU, then the global keep-top cut.
std::vector<Detection> box_nms(std::vector<Detection> detections, double iou_threshold,
                               int keep_top, InferenceStats* stats = nullptr);

/// Runs each detection's mask head over the bottom features: coordinate map at
/// its generator, 1x1 chain, sigmoid, upsample by the configured factor,
/// bilinear resize to the input size, threshold. Instances are independent, so
/// the work splits across `threads`; results do not depend on the count.
std::vector<InstanceResult> compute_masks(const std::vector<Detection>& detections,
                                          const FeatureMap& bottom, const ModelConfig& config,
                                          int image_height, int image_width,
                                          double mask_threshold = 0.5,
                                          InferenceStats* stats = nullptr, int threads = 1);

/// CONDINST_THREADS environment variable, defaulting to 1.
int thread_count_from_env();

/// Greedy class-wise NMS on binary-mask IoU, then the keep-top cut.
std::vector<InstanceResult> mask_nms(std::vector<InstanceResult> results, double iou_threshold,
                                     int keep_top);

/// 1-based argmax labels of the semantic logits, bilinearly resized to the
/// requested resolution first.
std::vector<int> semantic_argmax(const FeatureMap& semantic_logits, int out_height,
                                 int out_width);

/// Score-ordered stitching: drop low scores, let each instance claim pixels no
/// better instance took, discard it when the loss exceeds the threshold, fill
/// the rest with semantic stuff labels, and void out thing-labelled pixels
/// with no instance. The void segment (if any) appears in the table with
/// category 0 so segment areas always sum to the pixel count.
PanopticMap panoptic_merge(const std::vector<InstanceResult>& instances,
                           const std::vector<int>& semantic_labels, int num_stuff, int height,
                           int width, double score_min = 0.45, double max_loss = 0.40);

struct InferenceResult {
    std::vector<Detection> detections;  // survivors, score-descending
    std::vector<InstanceResult> instances;
    PanopticMap panoptic;  // empty unless with_panoptic
    InferenceStats stats;
};

/// The whole pipeline on one image (forward pass included).
InferenceResult run_inference(Model& model, const FeatureMap& image,
                              const InferenceOptions& options);

/// Row-major run-length encoding, alternating background/foreground run
/// lengths starting with background.
nlohmann::json rle_encode(const BinaryMask& mask);
BinaryMask rle_decode(const nlohmann::json& j);

/// Writes <stem>.json (detections + RLE masks, self-documented), and in
/// panoptic mode <stem>_panoptic.png (16-bit ids) + <stem>_segments.json.
void write_image_results(const std::string& directory, const std::string& stem,
                         const InferenceResult& result);

}  // namespace condinst
