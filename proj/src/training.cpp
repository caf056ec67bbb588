#include "condinst/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "condinst/json_util.hpp"
#include "condinst/ops.hpp"
#include "condinst/rng.hpp"

namespace condinst {

void validate(const TrainConfig& config) {
    require(config.iterations >= 0, ErrorKind::usage, "iterations must be non-negative");
    require(config.batch_size > 0, ErrorKind::usage, "batch size must be positive");
    require(config.learning_rate > 0, ErrorKind::usage, "learning rate must be positive");
    require(config.momentum >= 0 && config.momentum < 1, ErrorKind::usage,
            "momentum must be in [0,1)");
    require(config.weight_decay >= 0, ErrorKind::usage, "weight decay must be non-negative");
    require(config.lr_factor > 0 && config.lr_factor <= 1, ErrorKind::usage,
            "LR factor must be in (0,1]");
    int previous = 0;
    for (int milestone : config.lr_milestones) {
        require(milestone > previous, ErrorKind::usage,
                "LR milestones must be ascending and positive");
        require(milestone < config.iterations, ErrorKind::usage,
                "LR milestones must fall before the last iteration");
        previous = milestone;
    }
}

nlohmann::json train_config_to_json(const TrainConfig& config) {
    return nlohmann::json{
        {"iterations", config.iterations},
        {"batch_size", config.batch_size},
        {"learning_rate", config.learning_rate},
        {"momentum", config.momentum},
        {"weight_decay", config.weight_decay},
        {"lr_milestones", config.lr_milestones},
        {"lr_factor", config.lr_factor},
        {"seed", config.seed},
        {"panoptic_mode", config.panoptic_mode},
        {"aux_semantic", config.aux_semantic},
        {"flip_augmentation", config.flip_augmentation},
        {"targets",
         {{"center_radius", config.targets.center_radius},
          {"sample_cap", config.targets.sample_cap},
          {"soft_mask_targets", config.targets.soft_mask_targets}}},
        {"weights",
         {{"lambda", config.weights.lambda},
          {"mu", config.weights.mu},
          {"aux_weight", config.weights.aux_weight}}}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig config;
    config.iterations = j.value("iterations", config.iterations);
    config.batch_size = j.value("batch_size", config.batch_size);
    config.learning_rate = j.value("learning_rate", config.learning_rate);
    config.momentum = j.value("momentum", config.momentum);
    config.weight_decay = j.value("weight_decay", config.weight_decay);
    if (j.contains("lr_milestones"))
        config.lr_milestones = j["lr_milestones"].get<std::vector<int>>();
    config.lr_factor = j.value("lr_factor", config.lr_factor);
    config.seed = j.value("seed", config.seed);
    config.panoptic_mode = j.value("panoptic_mode", config.panoptic_mode);
    config.aux_semantic = j.value("aux_semantic", config.aux_semantic);
    config.flip_augmentation = j.value("flip_augmentation", config.flip_augmentation);
    if (j.contains("targets")) {
        const nlohmann::json& t = j["targets"];
        config.targets.center_radius = t.value("center_radius", config.targets.center_radius);
        config.targets.sample_cap = t.value("sample_cap", config.targets.sample_cap);
        config.targets.soft_mask_targets =
            t.value("soft_mask_targets", config.targets.soft_mask_targets);
    }
    if (j.contains("weights")) {
        const nlohmann::json& w = j["weights"];
        config.weights.lambda = w.value("lambda", config.weights.lambda);
        config.weights.mu = w.value("mu", config.weights.mu);
        config.weights.aux_weight = w.value("aux_weight", config.weights.aux_weight);
    }
    validate(config);
    return config;
}

double learning_rate_at(const TrainConfig& config, int iteration) {
    double lr = config.learning_rate;
    for (int milestone : config.lr_milestones)
        if (iteration > milestone) lr *= config.lr_factor;
    return lr;
}

// ---- augmentation ----------------------------------------------------------

namespace {

BinaryMask flip_mask(const BinaryMask& mask) {
    BinaryMask out(mask.height, mask.width);
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x) out.at(y, x) = mask.at(y, mask.width - 1 - x);
    return out;
}

}  // namespace

SceneAnnotation flip_scene_lr(const SceneAnnotation& scene) {
    SceneAnnotation out = scene;
    const int w = scene.width();
    for (int c = 0; c < out.image.channels; ++c)
        for (int y = 0; y < out.image.height; ++y)
            for (int x = 0; x < w; ++x) out.image.at(c, y, x) = scene.image.at(c, y, w - 1 - x);
    for (size_t i = 0; i < out.instances.size(); ++i) {
        InstanceAnnotation& inst = out.instances[i];
        inst.full_mask = flip_mask(scene.instances[i].full_mask);
        inst.visible_mask = flip_mask(scene.instances[i].visible_mask);
        inst.shape.cx = w - scene.instances[i].shape.cx;
        inst.shape.rotation = -scene.instances[i].shape.rotation;
        inst.tight_box.x1 = w - scene.instances[i].tight_box.x2;
        inst.tight_box.x2 = w - scene.instances[i].tight_box.x1;
    }
    for (int y = 0; y < scene.height(); ++y) {
        for (int x = 0; x < w; ++x) {
            out.panoptic[y * w + x] = scene.panoptic[y * w + (w - 1 - x)];
            out.stuff_label[y * w + x] = scene.stuff_label[y * w + (w - 1 - x)];
        }
    }
    return out;
}

// ---- loss over a batch -----------------------------------------------------

namespace {

std::pair<Var, LossBreakdown> scene_loss(Tape& tape, Model& model, const SceneAnnotation& scene,
                                         const TrainConfig& config) {
    const ModelConfig& mc = model.config();
    ModelOutputs out = model.forward(tape, scene.image);
    TargetSet targets = assign_targets(scene, mc, config.targets);

    std::map<int, Var> cls_maps, box_maps, ctr_maps;
    for (const auto& [level, head] : out.heads) {
        cls_maps[level] = head.cls;
        box_maps[level] = head.box;
        ctr_maps[level] = head.ctr;
    }
    Var l_cls = focal_loss_node(tape, cls_maps, targets, mc.num_classes);
    Var l_box = giou_loss_node(tape, box_maps, targets);
    Var l_ctr = centerness_loss_node(tape, ctr_maps, targets);

    // Mask term: rank each instance's positives by the current class
    // prediction, keep the capped sample, and run that location's mask head.
    std::vector<double> scores(targets.locations.size(), 0.0);
    for (size_t i = 0; i < targets.locations.size(); ++i) {
        const LocationTarget& loc = targets.locations[i];
        if (!loc.positive()) continue;
        const FeatureMap& cls = out.heads.at(loc.level).cls->value;
        scores[i] = sigmoid(cls.at(loc.class_label - 1, loc.y, loc.x));
    }
    const std::vector<size_t> sampled =
        sample_positives(targets, scores, config.targets.sample_cap);

    Var static_theta;
    if (mc.static_mask_head) static_theta = model.static_theta_on_tape(tape);
    const FeatureMap& bottom = out.bottom->value;
    std::vector<Var> dice_terms;
    for (size_t idx : sampled) {
        const LocationTarget& loc = targets.locations[idx];
        const InstanceAnnotation& inst = scene.instances[loc.instance_index];
        const FeatureMap coords =
            make_relative_coords(loc.px, loc.py, bottom.height, bottom.width, bottom.stride,
                                 mc.coord_mode, mc.coord_norm_constant);
        Var theta = mc.static_mask_head
                        ? static_theta
                        : tape.pixel_vector(out.heads.at(loc.level).controller, loc.y, loc.x);
        Var logits = model.apply_mask_head_on_tape(tape, out.bottom, coords, theta);
        Var probs = tape.sigmoid(logits);
        if (mc.upsample_factor > 1) probs = tape.upsample(probs, mc.upsample_factor);
        const FeatureMap gt = downsample_gt_mask(inst.full_mask, mc.mask_output_stride(),
                                                 config.targets.soft_mask_targets);
        dice_terms.push_back(dice_loss_node(tape, probs, gt));
    }
    Var l_mask = mask_loss_node(tape, dice_terms, targets.n_pos);

    Var l_pano, l_aux;
    if (config.panoptic_mode)
        l_pano = semantic_ce_loss_node(tape, out.semantic,
                                       semantic_label_map(scene, mc.bottom_stride()));
    if (config.aux_semantic)
        l_aux = semantic_ce_loss_node(tape, out.semantic,
                                      aux_semantic_label_map(scene, mc.bottom_stride()));

    return total_loss(tape, l_cls, l_box, l_ctr, l_mask, l_pano, l_aux, config.weights,
                      targets.n_pos);
}

void accumulate(LossBreakdown& total, const LossBreakdown& part, int batch) {
    total.l_cls += part.l_cls / batch;
    total.l_box += part.l_box / batch;
    total.l_ctr += part.l_ctr / batch;
    total.l_mask += part.l_mask / batch;
    total.l_pano += part.l_pano / batch;
    total.l_aux_sem += part.l_aux_sem / batch;
    total.total += part.total / batch;
    total.n_pos += part.n_pos;
    total.has_pano |= part.has_pano;
    total.has_aux |= part.has_aux;
    total.no_positives |= part.no_positives;
}

}  // namespace

std::pair<Var, LossBreakdown> batch_loss(Tape& tape, Model& model,
                                         const std::vector<const SceneAnnotation*>& batch,
                                         const TrainConfig& config) {
    require(!batch.empty(), ErrorKind::usage, "batch must not be empty");
    const int b = static_cast<int>(batch.size());
    std::vector<Var> totals;
    LossBreakdown breakdown;
    for (const SceneAnnotation* scene : batch) {
        auto [total, part] = scene_loss(tape, model, *scene, config);
        totals.push_back(total);
        accumulate(breakdown, part, b);
    }
    Var total = tape.weighted_sum(totals, std::vector<double>(totals.size(), 1.0 / b));
    return {total, breakdown};
}

// ---- the loop --------------------------------------------------------------

namespace {

namespace fs = std::filesystem;

void sgd_step(ParamStore& store, std::vector<double>& velocity, double lr, double momentum,
              double weight_decay) {
    double* values = store.values();
    const double* grads = store.grads();
    for (const ParamStore::Segment& seg : store.segments()) {
        const double wd = seg.decay ? weight_decay : 0.0;
        for (size_t i = seg.offset; i < seg.offset + seg.size; ++i) {
            const double g = grads[i] + wd * values[i];
            velocity[i] = momentum * velocity[i] + g;
            values[i] -= lr * velocity[i];
        }
    }
}

void write_log_row(std::ofstream& log, const IterationLog& row) {
    log << row.iteration << "," << row.lr << "," << row.loss.l_cls << "," << row.loss.l_box
        << "," << row.loss.l_ctr << "," << row.loss.l_mask << "," << row.loss.l_pano << ","
        << row.loss.l_aux_sem << "," << row.loss.total << "," << row.loss.n_pos << "\n";
    log.flush();
}

TrainResult run_training(Model& model, const std::string& dataset_dir, const TrainConfig& config,
                         const std::string& out_dir) {
    validate(config);
    Dataset dataset = read_dataset(dataset_dir);
    require(!dataset.scenes.empty(), ErrorKind::data, "dataset has no scenes: " + dataset_dir);
    fs::create_directories(out_dir);

    save_json_file((fs::path(out_dir) / "run_config.json").string(),
                   nlohmann::json{{"model", model_config_to_json(model.config())},
                                  {"train", train_config_to_json(config)},
                                  {"dataset", dataset_dir}});

    std::ofstream log_file((fs::path(out_dir) / "loss_log.csv").string());
    require(log_file.good(), ErrorKind::data, "cannot open loss log for writing");
    log_file << "iteration,lr,l_cls,l_box,l_ctr,l_mask,l_pano,l_aux_sem,total,n_pos\n";

    TrainResult result;
    Rng rng(config.seed);
    std::vector<double> velocity(model.params().size(), 0.0);
    std::vector<double> last_good(model.params().values(),
                                  model.params().values() + model.params().size());
    int last_good_iteration = 0;

    // Flipped views are deterministic; build each at most once.
    std::vector<SceneAnnotation> flipped(dataset.scenes.size());
    std::vector<bool> have_flipped(dataset.scenes.size(), false);

    for (int iteration = 1; iteration <= config.iterations; ++iteration) {
        std::vector<const SceneAnnotation*> batch;
        for (int b = 0; b < config.batch_size; ++b) {
            const size_t idx = static_cast<size_t>(
                rng.uniform_int(0, static_cast<int64_t>(dataset.scenes.size()) - 1));
            const bool flip = config.flip_augmentation && rng.bernoulli(0.5);
            if (!flip) {
                batch.push_back(&dataset.scenes[idx]);
            } else {
                if (!have_flipped[idx]) {
                    flipped[idx] = flip_scene_lr(dataset.scenes[idx]);
                    have_flipped[idx] = true;
                }
                batch.push_back(&flipped[idx]);
            }
        }

        const double lr = learning_rate_at(config, iteration);
        model.params().zero_grads();
        try {
            Tape tape(true);
            auto [total, breakdown] = batch_loss(tape, model, batch, config);
            tape.backward(total);
            sgd_step(model.params(), velocity, lr, config.momentum, config.weight_decay);
            for (size_t i = 0; i < model.params().size(); ++i)
                require(std::isfinite(model.params().values()[i]), ErrorKind::numeric,
                        "non-finite parameter after update");
            result.log.push_back({iteration, lr, breakdown});
            write_log_row(log_file, result.log.back());
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::numeric) throw;
            // Divergence: save the last healthy parameters, then surface the
            // component that broke.
            std::copy(last_good.begin(), last_good.end(), model.params().values());
            const std::string rescue = (fs::path(out_dir) / "checkpoint_last_good").string();
            model.save(rescue);
            throw Error(ErrorKind::numeric,
                        std::string(e.what()) + " at iteration " + std::to_string(iteration) +
                            "; last good checkpoint (iteration " +
                            std::to_string(last_good_iteration) + ") saved to " + rescue);
        }
        std::copy(model.params().values(), model.params().values() + model.params().size(),
                  last_good.begin());
        last_good_iteration = iteration;
        ++result.iterations_run;

        if (std::find(config.lr_milestones.begin(), config.lr_milestones.end(), iteration) !=
            config.lr_milestones.end())
            model.save((fs::path(out_dir) / ("checkpoint_" + std::to_string(iteration))).string());
    }

    result.final_checkpoint = (fs::path(out_dir) / "checkpoint_final").string();
    model.save(result.final_checkpoint);
    return result;
}

}  // namespace

TrainResult train(const ModelConfig& model_config, const std::string& dataset_dir,
                  const TrainConfig& config, const std::string& out_dir) {
    validate(model_config);
    Model model(model_config, config.seed);
    return run_training(model, dataset_dir, config, out_dir);
}

TrainResult train_vanilla_fcn_baseline(ModelConfig model_config, const std::string& dataset_dir,
                                       const TrainConfig& config, const std::string& out_dir) {
    model_config.static_mask_head = true;
    model_config.coord_mode = CoordMode::none;
    return train(model_config, dataset_dir, config, out_dir);
}

}  // namespace condinst
