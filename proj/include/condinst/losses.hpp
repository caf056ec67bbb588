#pragma once
// Training losses as fused tape nodes: each builds one scalar node whose
// backward closure pushes hand-derived analytic gradients into the logit maps
// it consumed.  Classification uses the alpha-balanced focal loss, boxes the
// center-ness-weighted GIoU loss, center-ness a plain BCE, masks the Dice
// overlap loss averaged over sampled positive locations, and the semantic
// branch a per-pixel softmax cross-entropy.

#include <map>
#include <vector>

#include "condinst/autograd.hpp"
#include "condinst/feature_map.hpp"
#include "condinst/synthdata.hpp"
#include "condinst/targets.hpp"

namespace condinst {

inline constexpr double kDiceEpsilon = 1e-6;

struct FocalConfig {
    double alpha = 0.25;
    double gamma = 2.0;
};

struct LossWeights {
    double lambda = 1.0;      // mask term
    double mu = 0.5;          // semantic (panoptic) term
    double aux_weight = 0.5;  // auxiliary semantic term, used only when present
};

struct LossBreakdown {
    double l_cls = 0, l_box = 0, l_ctr = 0, l_mask = 0, l_pano = 0, l_aux_sem = 0;
    double total = 0;
    int n_pos = 0;
    bool has_pano = false, has_aux = false;
    // Degenerate-image flags: a term was defined as 0 for lack of positives.
    bool no_positives = false;
};

/// Dice overlap loss 1 - (2*sum(p*m) + eps)/(sum(p^2) + sum(m^2) + eps) of a
/// probability map against a 0/1 target of the same shape. Empty vs empty is 0.
Var dice_loss_node(Tape& tape, Var pred, const FeatureMap& gt);

/// Mean of the sampled per-location Dice terms, normalized by the TOTAL
/// positive count (not the sampled count). n_pos == 0 yields 0 and sets the
/// flag.
Var mask_loss_node(Tape& tape, const std::vector<Var>& dice_terms, int n_pos,
                   bool* flagged = nullptr);

/// Focal classification loss over every location of every level (positives and
/// negatives, one-vs-all per class), normalized by max(n_pos, 1).
/// `cls_logits` maps level -> (num_classes, h, w) logits.
Var focal_loss_node(Tape& tape, const std::map<int, Var>& cls_logits, const TargetSet& targets,
                    int num_classes, const FocalConfig& config = {});

/// GIoU box loss over positive locations, each weighted by its center-ness
/// target and normalized by the weight sum. Raw head outputs are decoded as
/// distance = exp(raw) * stride. No positives (or zero weight sum) yields 0
/// and sets the flag.
Var giou_loss_node(Tape& tape, const std::map<int, Var>& box_raw, const TargetSet& targets,
                   bool* flagged = nullptr);

/// Mean binary cross-entropy of the center-ness logits against the center-ness
/// targets, over positive locations only.
Var centerness_loss_node(Tape& tape, const std::map<int, Var>& ctr_logits,
                         const TargetSet& targets, bool* flagged = nullptr);

/// Mean per-pixel softmax cross-entropy of (L, h, w) logits against 1-based
/// labels (row-major, length h*w, each in 1..L).
Var semantic_ce_loss_node(Tape& tape, Var logits, const std::vector<int>& labels);

/// 1-based stuff+thing label per cell at `stride`, sampled at cell centers
/// from the panoptic map: stuff keeps its label 1..S, a pixel owned by an
/// instance gets S + class_id.
std::vector<int> semantic_label_map(const SceneAnnotation& scene, int stride);

/// Labels for the auxiliary semantic task: like semantic_label_map but from
/// the FULL (amodal) instance masks, front-most instance winning overlaps.
std::vector<int> aux_semantic_label_map(const SceneAnnotation& scene, int stride);

/// Weighted total: cls + box + ctr + lambda*mask + mu*pano + aux*aux_sem.
/// Optional parts may be null. Rejects non-finite parts naming the component.
/// Returns the scalar node for backward plus the numeric breakdown.
std::pair<Var, LossBreakdown> total_loss(Tape& tape, Var cls, Var box, Var ctr, Var mask,
                                         Var pano, Var aux_sem, const LossWeights& weights,
                                         int n_pos);

}  // namespace condinst
