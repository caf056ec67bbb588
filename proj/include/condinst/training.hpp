#pragma once
// The optimization loop: mini-batch SGD with momentum and segment-aware
// weight decay, a stepped learning-rate schedule, deterministic batching and
// flip augmentation, per-iteration loss logging, and milestone checkpoints.
// Also hosts the control arm: a static shared mask head without coordinate
// channels, trained with the identical loop.

#include <string>
#include <vector>

#include <json.hpp>

#include "condinst/losses.hpp"
#include "condinst/model.hpp"
#include "condinst/synthdata.hpp"
#include "condinst/targets.hpp"

namespace condinst {

struct TrainConfig {
    int iterations = 2000;
    int batch_size = 8;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::vector<int> lr_milestones = {1500};  // ascending, each below `iterations`
    double lr_factor = 0.1;
    uint64_t seed = 1;
    bool panoptic_mode = false;     // adds the semantic stitching loss term
    bool aux_semantic = false;      // auxiliary semantic task from amodal masks
    bool flip_augmentation = false;  // left-right flips, targets recomputed after
    TargetConfig targets;
    LossWeights weights;
};

void validate(const TrainConfig& config);
nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Learning rate for a 1-based iteration: the base rate decayed once per
/// milestone already completed.
double learning_rate_at(const TrainConfig& config, int iteration);

struct IterationLog {
    int iteration = 0;  // 1-based
    double lr = 0;
    LossBreakdown loss;
};

struct TrainResult {
    std::string final_checkpoint;  // directory of the end-of-run checkpoint
    std::vector<IterationLog> log;
    int iterations_run = 0;
};

/// A whole scene mirrored left-right: image, masks, shapes, boxes, and the
/// panoptic/stuff grids. Targets are recomputed downstream from the flipped
/// annotation rather than by negating coordinate channels.
SceneAnnotation flip_scene_lr(const SceneAnnotation& scene);

/// Forward passes and the full loss for one batch on one tape; shared by the
/// training loop and tests. Scores for mask-location sampling come from the
/// current class predictions.
std::pair<Var, LossBreakdown> batch_loss(Tape& tape, Model& model,
                                         const std::vector<const SceneAnnotation*>& batch,
                                         const TrainConfig& config);

/// Runs the loop on a stored dataset. Writes into `out_dir`: run_config.json,
/// loss_log.csv (streamed, one row per iteration), checkpoint_<milestone>/
/// after each milestone, and checkpoint_final/. Deterministic given the seed.
/// A non-finite loss aborts with ErrorKind::numeric naming the component; the
/// last good parameters are saved to checkpoint_last_good/ first.
TrainResult train(const ModelConfig& model_config, const std::string& dataset_dir,
                  const TrainConfig& config, const std::string& out_dir);

/// The control arm: same loop, but the mask head is one trainable parameter
/// vector shared by every instance and the coordinate channels are zeroed.
TrainResult train_vanilla_fcn_baseline(ModelConfig model_config, const std::string& dataset_dir,
                                       const TrainConfig& config, const std::string& out_dir);

}  // namespace condinst
