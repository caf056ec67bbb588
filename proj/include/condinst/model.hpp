#pragma once
// The network: tiny backbone + FPN-lite, per-level shared heads
// (classification, box, center-ness, controller), the bottom branch feeding
// every dynamic mask head, relative-coordinate construction, dynamic-filter
// unpacking, and checkpoint I/O.
//
// The controller head emits, at every location, a flat parameter vector theta
// that is sliced into the weights and biases of that location's private
// mask head — a stack of 1x1 convolutions run over the shared bottom features
// augmented with two coordinate channels.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "condinst/autograd.hpp"
#include "condinst/feature_map.hpp"

namespace condinst {

/// Input-image coordinate of a pyramid cell's center: floor(s/2) + x*s.
inline int map_cell_to_input(int cell, int stride) { return stride / 2 + cell * stride; }

enum class CoordMode { rel, abs, none };
CoordMode coord_mode_from_name(const std::string& name);
const char* coord_mode_name(CoordMode mode);

struct ModelConfig {
    std::vector<int> fpn_levels = {3, 4, 5};  // level i has stride 2^i; contiguous, in [2,7]
    int head_channels = 32;
    int mask_head_depth = 3;   // d
    int mask_head_width = 8;   // w
    int c_bottom = 8;          // channels of the shared bottom features
    int bottom_level = 3;      // 3 or 2: stride of the bottom features (8 or 4)
    int upsample_factor = 2;   // 1, 2 or 4: mask upsampling after the head
    int num_classes = 3;       // thing classes
    int num_stuff_classes = 2; // for the semantic branch (stuff + thing channels)
    double coord_norm_constant = 32.0;
    CoordMode coord_mode = CoordMode::rel;
    // Control arm: no controller head; a single trainable parameter vector of
    // the same length drives one shared (static) mask head for all instances.
    bool static_mask_head = false;

    int stride_of_level(int level) const { return 1 << level; }
    int bottom_stride() const { return stride_of_level(bottom_level); }
    int mask_output_stride() const { return bottom_stride() / upsample_factor; }
    int semantic_channels() const { return num_stuff_classes + num_classes; }
};

void validate(const ModelConfig& config);
nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Closed-form length of the flat dynamic-parameter vector theta.
int num_filter_params(const ModelConfig& config);

/// Where each mask-head layer's weights and biases live inside theta.
/// Layout: layer 0 weights, layer 0 biases, layer 1 weights, ...
struct ThetaLayout {
    struct Layer {
        size_t weight_offset = 0;
        size_t bias_offset = 0;
        int in_channels = 0;
        int out_channels = 0;
    };
    std::vector<Layer> layers;
    size_t total = 0;
};
ThetaLayout theta_layout(const ModelConfig& config);

/// A materialized mask head: d 1x1 convolutions, ReLU between all but the last.
struct MaskHead {
    std::vector<ConvSpec> layers;
    size_t parameter_count() const;
};

MaskHead unpack_filter_params(const std::vector<double>& theta, const ModelConfig& config);

/// Raw logits of a mask head over coordinate-augmented bottom features
/// (channels = c_bottom + 2). Sigmoid is the caller's business.
FeatureMap apply_mask_head(const FeatureMap& bottom_with_coords, const MaskHead& head);

/// The 2-channel coordinate map O for a generator at input-space (px, py):
/// rel: (cell_input_xy - generator_xy)/norm; abs: cell_input_xy/norm; none: zeros.
FeatureMap make_relative_coords(int generator_px, int generator_py, int bottom_h, int bottom_w,
                                int bottom_stride, CoordMode mode, double norm);

/// Reusable buffers for run_mask_stage so per-instance work allocates nothing
/// once warm; one per thread, instances never share.
struct MaskStageScratch {
    FeatureMap coords;     // 2-channel generator offsets, rebuilt per instance
    FeatureMap h1, h2;     // ping-pong layer activations
    FeatureMap probs;      // sigmoid output at bottom resolution
    FeatureMap upsampled;  // after the configured upsample factor
    std::vector<const double*> ins;  // per-layer input plane pointers
};

/// One instance's whole mask stage over reused buffers: the first 1x1 layer
/// reads the bottom and coordinate planes directly (the concatenated input is
/// never materialized), layer weights are read in place from theta, and all
/// intermediates live in `scratch`. Numerically equivalent to
/// make_relative_coords + concat + unpack_filter_params + apply_mask_head +
/// sigmoid (+ bilinear_upsample) but free of per-instance allocation, which
/// keeps the per-instance cost flat as the instance count grows. Returns the
/// probability map held inside `scratch`.
const FeatureMap& run_mask_stage(const ModelConfig& config, const FeatureMap& bottom, int px,
                                 int py, const std::vector<double>& theta,
                                 MaskStageScratch& scratch);

struct HeadVars {
    Var cls;         // num_classes channels, logits
    Var ctr;         // 1 channel, logit
    Var box;         // 4 channels (l,t,r,b) raw; positive distances are exp(raw)*stride
    Var controller;  // num_filter_params channels (absent for the static arm)
};

struct ModelOutputs {
    std::map<int, Var> pyramid;    // level -> feature map
    std::map<int, HeadVars> heads; // level -> head outputs
    Var bottom;                    // c_bottom channels at bottom stride
    Var semantic;                  // stuff+thing logits at bottom stride
};

class Model {
public:
    Model(const ModelConfig& config, uint64_t init_seed);

    const ModelConfig& config() const { return config_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    /// Runs the full network on one image (3 channels, stride 1, sides
    /// divisible by the largest configured stride).
    ModelOutputs forward(Tape& tape, const FeatureMap& image);

    /// Mask-head chain on the tape for one generator: concat coords, slice
    /// theta, 1x1 convs with ReLU between. Returns raw logits (1 channel).
    /// `theta` must be a (N,1,1) node, e.g. from Tape::pixel_vector, or the
    /// static head parameter for the control arm.
    Var apply_mask_head_on_tape(Tape& tape, Var bottom, const FeatureMap& coords, Var theta);

    /// The static-arm parameter vector as a tape node (requires static head).
    Var static_theta_on_tape(Tape& tape);

    void save(const std::string& directory) const;
    static Model load(const std::string& directory);

private:
    struct ConvParam {
        size_t w = 0, b = 0;
        int in_c = 0, out_c = 0, k = 3;
    };
    ConvParam add_conv(const std::string& name, int in_c, int out_c, int k, bool decay = true);
    Var conv(Tape& tape, Var x, const ConvParam& p);

    ModelConfig config_;
    ParamStore store_;

    ConvParam stem_, stage1_, stage2_, stage3_, stage4_, stage5_;
    std::map<int, ConvParam> lateral_, smooth_;  // levels 2..5 as needed
    ConvParam p6_, p7_;                          // present only when configured
    std::vector<ConvParam> cls_tower_, box_tower_;
    ConvParam cls_proj_, ctr_proj_, box_proj_, controller_proj_;
    std::vector<ConvParam> bottom_tower_;
    ConvParam bottom_reduce_, semantic_proj_;
    size_t static_theta_offset_ = 0;  // static arm only
};

}  // namespace condinst
