#include "condinst/losses.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "condinst/ops.hpp"

namespace condinst {

namespace {

// Checks that the per-level maps cover exactly the target grid.
void check_level_maps(const std::map<int, Var>& maps, const TargetSet& targets,
                      int expected_channels, const char* what) {
    require(maps.size() == targets.level_size.size(), ErrorKind::usage,
            std::string(what) + ": level maps do not match the target levels");
    for (const auto& [level, size] : targets.level_size) {
        const auto it = maps.find(level);
        require(it != maps.end(), ErrorKind::usage,
                std::string(what) + ": missing level " + std::to_string(level));
        const FeatureMap& m = it->second->value;
        require(m.channels == expected_channels && m.height == size.first &&
                    m.width == size.second,
                ErrorKind::usage, std::string(what) + ": map shape mismatch at level " +
                                      std::to_string(level));
    }
}

double stable_softplus(double z) {  // log(1 + exp(z))
    return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

}  // namespace

Var dice_loss_node(Tape& tape, Var pred, const FeatureMap& gt) {
    require(pred->value.same_shape(gt), ErrorKind::usage,
            "dice loss needs equally shaped prediction and target");
    const FeatureMap& p = pred->value;
    double inter = 0, p2 = 0, m2 = 0;
    for (size_t i = 0; i < p.data.size(); ++i) {
        require(p.data[i] >= 0.0 && p.data[i] <= 1.0, ErrorKind::usage,
                "dice loss expects probabilities in [0,1]");
        inter += p.data[i] * gt.data[i];
        p2 += p.data[i] * p.data[i];
        m2 += gt.data[i] * gt.data[i];
    }
    const double numer = 2.0 * inter + kDiceEpsilon;
    const double denom = p2 + m2 + kDiceEpsilon;
    FeatureMap v(1, 1, 1);
    v.data[0] = 1.0 - numer / denom;

    Node* pp = pred.get();
    FeatureMap gt_copy = gt;
    return tape.custom(std::move(v), {pred}, [pp, gt_copy, numer, denom](const FeatureMap& g) {
        // d/dp_i [1 - N/D] with N = 2*sum(pm)+eps, D = sum(p^2)+sum(m^2)+eps:
        // 2*(N*p_i - m_i*D)/D^2.
        const double scale = g.data[0] * 2.0 / (denom * denom);
        for (size_t i = 0; i < gt_copy.data.size(); ++i)
            pp->grad.data[i] +=
                scale * (numer * pp->value.data[i] - gt_copy.data[i] * denom);
    });
}

Var mask_loss_node(Tape& tape, const std::vector<Var>& dice_terms, int n_pos, bool* flagged) {
    if (flagged) *flagged = n_pos == 0;
    if (n_pos == 0) {
        require(dice_terms.empty(), ErrorKind::usage,
                "mask terms supplied for an image without positives");
        return tape.scalar(0.0);
    }
    require(!dice_terms.empty(), ErrorKind::usage, "no sampled mask terms");
    require(static_cast<int>(dice_terms.size()) <= n_pos, ErrorKind::usage,
            "more sampled mask terms than positive locations");
    const std::vector<double> coeffs(dice_terms.size(), 1.0 / n_pos);
    return tape.weighted_sum(dice_terms, coeffs);
}

Var focal_loss_node(Tape& tape, const std::map<int, Var>& cls_logits, const TargetSet& targets,
                    int num_classes, const FocalConfig& config) {
    require(num_classes >= 1, ErrorKind::usage, "need at least one class");
    require(config.gamma >= 0.0 && config.alpha > 0.0 && config.alpha < 1.0, ErrorKind::usage,
            "focal parameters out of range");
    check_level_maps(cls_logits, targets, num_classes, "focal loss");
    const double norm = std::max(targets.n_pos, 1);
    const double alpha = config.alpha, gamma = config.gamma;

    double total = 0.0;
    for (const auto& [level, var] : cls_logits) {
        const FeatureMap& m = var->value;
        const size_t base = targets.level_offset.at(level);
        const size_t plane = static_cast<size_t>(m.height) * m.width;
        for (size_t cell = 0; cell < plane; ++cell) {
            const int label = targets.locations[base + cell].class_label;
            for (int c = 0; c < num_classes; ++c) {
                const double z = m.data[static_cast<size_t>(c) * plane + cell];
                const double p = sigmoid(z);
                if (label == c + 1)
                    total += -alpha * std::pow(1.0 - p, gamma) * log_sigmoid(z);
                else
                    total += -(1.0 - alpha) * std::pow(p, gamma) * log_sigmoid(-z);
            }
        }
    }
    FeatureMap v(1, 1, 1);
    v.data[0] = total / norm;

    std::vector<Var> parents;
    for (const auto& [level, var] : cls_logits) parents.push_back(var);
    // Copy the light-weight indexing pieces for the closure.
    auto targets_copy = std::make_shared<TargetSet>(targets);
    auto maps = cls_logits;
    return tape.custom(
        std::move(v), parents, [maps, targets_copy, num_classes, alpha, gamma, norm](const FeatureMap& g) {
            const double outer = g.data[0] / norm;
            for (const auto& [level, var] : maps) {
                const FeatureMap& m = var->value;
                const size_t base = targets_copy->level_offset.at(level);
                const size_t plane = static_cast<size_t>(m.height) * m.width;
                for (size_t cell = 0; cell < plane; ++cell) {
                    const int label = targets_copy->locations[base + cell].class_label;
                    for (int c = 0; c < num_classes; ++c) {
                        const size_t idx = static_cast<size_t>(c) * plane + cell;
                        const double z = m.data[idx];
                        const double p = sigmoid(z);
                        double dz;
                        if (label == c + 1)
                            dz = alpha * (gamma * p * std::pow(1.0 - p, gamma) * log_sigmoid(z) -
                                          std::pow(1.0 - p, gamma + 1.0));
                        else
                            dz = (1.0 - alpha) *
                                 (std::pow(p, gamma + 1.0) -
                                  gamma * (1.0 - p) * std::pow(p, gamma) * log_sigmoid(-z));
                        var->grad.data[idx] += outer * dz;
                    }
                }
            }
        });
}

namespace {

// One positive location's GIoU term around its shared anchor point: both boxes
// contain the anchor, so they always intersect. Returns 1 - GIoU and the
// gradient with respect to the four predicted distances.
struct GiouTerm {
    double loss = 0;
    double d[4] = {0, 0, 0, 0};  // d(loss)/d(lp, tp, rp, bp)
};

GiouTerm giou_term(double lp, double tp, double rp, double bp, double lg, double tg, double rg,
                   double bg) {
    const double wp = lp + rp, hp = tp + bp;
    const double iw = std::min(lp, lg) + std::min(rp, rg);
    const double ih = std::min(tp, tg) + std::min(bp, bg);
    const double inter = iw * ih;
    const double ap = wp * hp;
    const double ag = (lg + rg) * (tg + bg);
    const double uni = ap + ag - inter;
    const double cw = std::max(lp, lg) + std::max(rp, rg);
    const double ch = std::max(tp, tg) + std::max(bp, bg);
    const double ac = cw * ch;

    GiouTerm out;
    out.loss = 1.0 - (inter / uni - (ac - uni) / ac);

    // Branch indicators of the min/max picks.
    const double diw[4] = {lp < lg ? 1.0 : 0.0, 0.0, rp < rg ? 1.0 : 0.0, 0.0};
    const double dih[4] = {0.0, tp < tg ? 1.0 : 0.0, 0.0, bp < bg ? 1.0 : 0.0};
    const double dap[4] = {hp, wp, hp, wp};
    const double dcw[4] = {lp > lg ? 1.0 : 0.0, 0.0, rp > rg ? 1.0 : 0.0, 0.0};
    const double dch[4] = {0.0, tp > tg ? 1.0 : 0.0, 0.0, bp > bg ? 1.0 : 0.0};
    for (int k = 0; k < 4; ++k) {
        const double dinter = ih * diw[k] + iw * dih[k];
        const double duni = dap[k] - dinter;
        const double diou = (dinter * uni - inter * duni) / (uni * uni);
        const double dac = ch * dcw[k] + cw * dch[k];
        // penalty = 1 - uni/ac
        const double dpen = -(duni * ac - uni * dac) / (ac * ac);
        out.d[k] = -(diou - dpen);
    }
    return out;
}

}  // namespace

Var giou_loss_node(Tape& tape, const std::map<int, Var>& box_raw, const TargetSet& targets,
                   bool* flagged) {
    check_level_maps(box_raw, targets, 4, "giou loss");
    double weight_sum = 0.0;
    for (const LocationTarget& loc : targets.locations)
        if (loc.positive()) weight_sum += loc.centerness;
    if (flagged) *flagged = weight_sum == 0.0;
    if (weight_sum == 0.0) return tape.scalar(0.0);

    auto term_at = [](const FeatureMap& m, const LocationTarget& loc) {
        const size_t plane = static_cast<size_t>(m.height) * m.width;
        const size_t cell = static_cast<size_t>(loc.y) * m.width + loc.x;
        const double s = 1 << loc.level;
        double d[4];
        for (int k = 0; k < 4; ++k) d[k] = std::exp(m.data[k * plane + cell]) * s;
        return giou_term(d[0], d[1], d[2], d[3], loc.l, loc.t, loc.r, loc.b);
    };

    double total = 0.0;
    for (const LocationTarget& loc : targets.locations) {
        if (!loc.positive()) continue;
        total += loc.centerness * term_at(box_raw.at(loc.level)->value, loc).loss;
    }
    FeatureMap v(1, 1, 1);
    v.data[0] = total / weight_sum;

    std::vector<Var> parents;
    for (const auto& [level, var] : box_raw) parents.push_back(var);
    auto targets_copy = std::make_shared<TargetSet>(targets);
    auto maps = box_raw;
    return tape.custom(std::move(v), parents,
                       [maps, targets_copy, weight_sum, term_at](const FeatureMap& g) {
                           const double outer = g.data[0] / weight_sum;
                           for (const LocationTarget& loc : targets_copy->locations) {
                               if (!loc.positive()) continue;
                               Var var = maps.at(loc.level);
                               const FeatureMap& m = var->value;
                               const size_t plane = static_cast<size_t>(m.height) * m.width;
                               const size_t cell = static_cast<size_t>(loc.y) * m.width + loc.x;
                               const GiouTerm t = term_at(m, loc);
                               const double s = 1 << loc.level;
                               for (int k = 0; k < 4; ++k) {
                                   // Chain through distance = exp(raw)*stride.
                                   const double dist = std::exp(m.data[k * plane + cell]) * s;
                                   var->grad.data[k * plane + cell] +=
                                       outer * loc.centerness * t.d[k] * dist;
                               }
                           }
                       });
}

Var centerness_loss_node(Tape& tape, const std::map<int, Var>& ctr_logits,
                         const TargetSet& targets, bool* flagged) {
    check_level_maps(ctr_logits, targets, 1, "center-ness loss");
    if (flagged) *flagged = targets.n_pos == 0;
    if (targets.n_pos == 0) return tape.scalar(0.0);

    double total = 0.0;
    for (const LocationTarget& loc : targets.locations) {
        if (!loc.positive()) continue;
        const FeatureMap& m = ctr_logits.at(loc.level)->value;
        const double z = m.at(0, loc.y, loc.x);
        total += stable_softplus(z) - loc.centerness * z;
    }
    FeatureMap v(1, 1, 1);
    v.data[0] = total / targets.n_pos;

    std::vector<Var> parents;
    for (const auto& [level, var] : ctr_logits) parents.push_back(var);
    auto targets_copy = std::make_shared<TargetSet>(targets);
    auto maps = ctr_logits;
    const double norm = targets.n_pos;
    return tape.custom(std::move(v), parents, [maps, targets_copy, norm](const FeatureMap& g) {
        const double outer = g.data[0] / norm;
        for (const LocationTarget& loc : targets_copy->locations) {
            if (!loc.positive()) continue;
            Var var = maps.at(loc.level);
            const double z = var->value.at(0, loc.y, loc.x);
            var->grad.at(0, loc.y, loc.x) += outer * (sigmoid(z) - loc.centerness);
        }
    });
}

Var semantic_ce_loss_node(Tape& tape, Var logits, const std::vector<int>& labels) {
    const FeatureMap& m = logits->value;
    const size_t plane = static_cast<size_t>(m.height) * m.width;
    require(labels.size() == plane, ErrorKind::usage,
            "need one semantic label per logit cell");
    for (int label : labels)
        require(label >= 1 && label <= m.channels, ErrorKind::usage,
                "semantic label " + std::to_string(label) + " outside 1.." +
                    std::to_string(m.channels));

    double total = 0.0;
    for (size_t cell = 0; cell < plane; ++cell) {
        double zmax = m.data[cell];
        for (int c = 1; c < m.channels; ++c)
            zmax = std::max(zmax, m.data[static_cast<size_t>(c) * plane + cell]);
        double lse = 0.0;
        for (int c = 0; c < m.channels; ++c)
            lse += std::exp(m.data[static_cast<size_t>(c) * plane + cell] - zmax);
        lse = std::log(lse) + zmax;
        total += lse - m.data[static_cast<size_t>(labels[cell] - 1) * plane + cell];
    }
    FeatureMap v(1, 1, 1);
    v.data[0] = total / static_cast<double>(plane);

    Node* lp = logits.get();
    auto labels_copy = labels;
    return tape.custom(std::move(v), {logits}, [lp, labels_copy, plane](const FeatureMap& g) {
        const FeatureMap& m = lp->value;
        const double outer = g.data[0] / static_cast<double>(plane);
        for (size_t cell = 0; cell < plane; ++cell) {
            double zmax = m.data[cell];
            for (int c = 1; c < m.channels; ++c)
                zmax = std::max(zmax, m.data[static_cast<size_t>(c) * plane + cell]);
            double denom = 0.0;
            for (int c = 0; c < m.channels; ++c)
                denom += std::exp(m.data[static_cast<size_t>(c) * plane + cell] - zmax);
            for (int c = 0; c < m.channels; ++c) {
                const size_t idx = static_cast<size_t>(c) * plane + cell;
                const double soft = std::exp(m.data[idx] - zmax) / denom;
                const double onehot = labels_copy[cell] == c + 1 ? 1.0 : 0.0;
                lp->grad.data[idx] += outer * (soft - onehot);
            }
        }
    });
}

namespace {

std::vector<int> label_map_from(const SceneAnnotation& scene, int stride,
                                bool from_full_masks) {
    require(stride >= 1, ErrorKind::usage, "stride must be positive");
    require(scene.height() % stride == 0 && scene.width() % stride == 0, ErrorKind::usage,
            "scene size is not divisible by the semantic stride");
    const int gh = scene.height() / stride;
    const int gw = scene.width() / stride;
    std::vector<int> labels(static_cast<size_t>(gh) * gw, 0);
    for (int y = 0; y < gh; ++y)
        for (int x = 0; x < gw; ++x) {
            const int px = map_cell_to_input(x, stride);
            const int py = map_cell_to_input(y, stride);
            const size_t pixel = static_cast<size_t>(py) * scene.width() + px;
            int label = scene.stuff_label[pixel];
            if (from_full_masks) {
                // Front-most full mask wins, matching the z-resolved painting.
                int best_z = std::numeric_limits<int>::min();
                for (const InstanceAnnotation& inst : scene.instances)
                    if (inst.full_mask.at(py, px) && inst.shape.z_order > best_z) {
                        best_z = inst.shape.z_order;
                        label = scene.num_stuff + inst.shape.class_id;
                    }
            } else {
                const int id = scene.panoptic[pixel];
                if (id > scene.num_stuff) {
                    const int inst = id - scene.num_stuff - 1;
                    label = scene.num_stuff + scene.instances[inst].shape.class_id;
                }
            }
            labels[static_cast<size_t>(y) * gw + x] = label;
        }
    return labels;
}

}  // namespace

std::vector<int> semantic_label_map(const SceneAnnotation& scene, int stride) {
    return label_map_from(scene, stride, false);
}

std::vector<int> aux_semantic_label_map(const SceneAnnotation& scene, int stride) {
    return label_map_from(scene, stride, true);
}

std::pair<Var, LossBreakdown> total_loss(Tape& tape, Var cls, Var box, Var ctr, Var mask,
                                         Var pano, Var aux_sem, const LossWeights& weights,
                                         int n_pos) {
    auto check = [](const Var& v, const char* name) {
        require(v != nullptr, ErrorKind::usage, std::string("missing ") + name + " loss term");
        require(v->value.size() == 1, ErrorKind::usage,
                std::string(name) + " loss must be scalar");
        require(std::isfinite(v->value.data[0]), ErrorKind::numeric,
                std::string("non-finite ") + name + " loss");
    };
    check(cls, "classification");
    check(box, "box");
    check(ctr, "center-ness");
    check(mask, "mask");

    LossBreakdown br;
    br.n_pos = n_pos;
    br.no_positives = n_pos == 0;
    br.l_cls = cls->value.data[0];
    br.l_box = box->value.data[0];
    br.l_ctr = ctr->value.data[0];
    br.l_mask = mask->value.data[0];

    std::vector<Var> parts{cls, box, ctr, mask};
    std::vector<double> coeffs{1.0, 1.0, 1.0, weights.lambda};
    if (pano) {
        check(pano, "semantic");
        br.has_pano = true;
        br.l_pano = pano->value.data[0];
        parts.push_back(pano);
        coeffs.push_back(weights.mu);
    }
    if (aux_sem) {
        check(aux_sem, "auxiliary semantic");
        br.has_aux = true;
        br.l_aux_sem = aux_sem->value.data[0];
        parts.push_back(aux_sem);
        coeffs.push_back(weights.aux_weight);
    }
    Var total = tape.weighted_sum(parts, coeffs);
    br.total = total->value.data[0];
    require(std::isfinite(br.total), ErrorKind::numeric, "non-finite total loss");
    return {total, br};
}

}  // namespace condinst
