#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ldreg/adam.hpp"
#include "ldreg/checkpoint.hpp"
#include "ldreg/dataset.hpp"
#include "ldreg/losses.hpp"
#include "ldreg/model.hpp"
#include "ldreg/network.hpp"
#include "ldreg/spatial_transform.hpp"

namespace ldreg {

enum class Stage { GlobalOnly, Joint };

inline std::string to_string(Stage s) { return s == Stage::GlobalOnly ? "global" : "joint"; }

struct TrainConfig {
    double learning_rate = 1e-5;
    int minibatch_size = 10;
    int global_warmup_iters = 1000;
    int total_iters = 10000;
    LossWeights weights{};
    int global_channels = 4;
    int local_channels = 32;
    double affine_matrix_scale = 1.0;
    double affine_translation_scale = 1.0;
    bool augment = false;
    double augment_magnitude = 1.0;
    std::uint64_t seed = 0;
    int log_every = 1;
    int checkpoint_every = 0; // 0: final checkpoint only
    int validate_every = 0;   // 0: no validation records

    static TrainConfig paper() { return {}; }

    /// Small-volume setting that trains on one CPU core.
    static TrainConfig desk() {
        TrainConfig c;
        c.learning_rate = 1e-3;
        c.minibatch_size = 2;
        c.global_warmup_iters = 200;
        c.total_iters = 2000;
        c.global_channels = 2;
        c.local_channels = 8;
        c.affine_matrix_scale = 0.03;
        return c;
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"learning_rate", c.learning_rate},
         {"minibatch_size", c.minibatch_size},
         {"global_warmup_iters", c.global_warmup_iters},
         {"total_iters", c.total_iters},
         {"bending_weight", c.weights.bending_weight},
         {"weight_decay", c.weights.weight_decay},
         {"clamp_epsilon", c.weights.clamp_epsilon},
         {"l2_gradient_weight", c.weights.l2_gradient_weight},
         {"global_channels", c.global_channels},
         {"local_channels", c.local_channels},
         {"affine_matrix_scale", c.affine_matrix_scale},
         {"affine_translation_scale", c.affine_translation_scale},
         {"augment", c.augment},
         {"augment_magnitude", c.augment_magnitude},
         {"seed", c.seed},
         {"log_every", c.log_every},
         {"checkpoint_every", c.checkpoint_every},
         {"validate_every", c.validate_every}};
}

/// Missing keys take the preset named by "preset" ("paper" or "desk",
/// default "paper").
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    const std::string preset = j.value("preset", std::string("paper"));
    require(preset == "paper" || preset == "desk", ErrorCode::InvalidArgument, "unknown preset '" + preset + "'");
    const TrainConfig d = preset == "desk" ? TrainConfig::desk() : TrainConfig::paper();
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.minibatch_size = j.value("minibatch_size", d.minibatch_size);
    c.global_warmup_iters = j.value("global_warmup_iters", d.global_warmup_iters);
    c.total_iters = j.value("total_iters", d.total_iters);
    c.weights.bending_weight = j.value("bending_weight", d.weights.bending_weight);
    c.weights.weight_decay = j.value("weight_decay", d.weights.weight_decay);
    c.weights.clamp_epsilon = j.value("clamp_epsilon", d.weights.clamp_epsilon);
    c.weights.l2_gradient_weight = j.value("l2_gradient_weight", d.weights.l2_gradient_weight);
    c.global_channels = j.value("global_channels", d.global_channels);
    c.local_channels = j.value("local_channels", d.local_channels);
    c.affine_matrix_scale = j.value("affine_matrix_scale", d.affine_matrix_scale);
    c.affine_translation_scale = j.value("affine_translation_scale", d.affine_translation_scale);
    c.augment = j.value("augment", d.augment);
    c.augment_magnitude = j.value("augment_magnitude", d.augment_magnitude);
    c.seed = j.value("seed", d.seed);
    c.log_every = j.value("log_every", d.log_every);
    c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
    c.validate_every = j.value("validate_every", d.validate_every);
}

inline void validate(const TrainConfig& c) {
    require(c.learning_rate > 0 && c.minibatch_size > 0 && c.global_warmup_iters >= 0 && c.total_iters >= 0 &&
                c.global_channels > 0 && c.local_channels > 0 && c.log_every > 0 && c.checkpoint_every >= 0 &&
                c.validate_every >= 0 && c.affine_matrix_scale > 0 && c.affine_translation_scale > 0,
            ErrorCode::InvalidArgument, "training config has a non-positive count or rate");
}

inline NetworkConfig network_config(const TrainConfig& c, const Shape3& fixed_shape) {
    NetworkConfig n;
    n.global_channels = c.global_channels;
    n.local_channels = c.local_channels;
    n.affine_matrix_scale = c.affine_matrix_scale;
    n.affine_translation_scale = c.affine_translation_scale;
    n.input_shape = padded_shape(fixed_shape);
    return n;
}

/// Network settings recorded in a checkpoint.
inline nlohmann::json network_json(const NetworkConfig& n) {
    return {{"global_channels", n.global_channels}, {"local_channels", n.local_channels}, {"input_shape", n.input_shape},
            {"affine_matrix_scale", n.affine_matrix_scale}, {"affine_translation_scale", n.affine_translation_scale}};
}

inline NetworkConfig network_from_json(const nlohmann::json& j) {
    NetworkConfig n;
    try {
        n.global_channels = j.at("global_channels").get<int>();
        n.local_channels = j.at("local_channels").get<int>();
        n.input_shape = j.at("input_shape").get<Shape3>();
        n.affine_matrix_scale = j.value("affine_matrix_scale", n.affine_matrix_scale);
        n.affine_translation_scale = j.value("affine_translation_scale", n.affine_translation_scale);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::CheckpointMismatch, std::string("checkpoint network config: ") + e.what());
    }
    return n;
}

// ---------------------------------------------------------------- sampling

struct Draw {
    int case_index;
    int label_index;
};

/// Cases uniformly with replacement; one label pair per case, high
/// confidence pairs weighted 2 and the rest 1.
template <typename Rng>
std::vector<Draw> sample_minibatch(const std::vector<Case>& cases, int size, Rng& rng) {
    require(!cases.empty(), ErrorCode::EmptyDataset, "no cases to sample from");
    std::vector<Draw> out;
    out.reserve(static_cast<std::size_t>(size));
    std::uniform_int_distribution<int> pick(0, static_cast<int>(cases.size()) - 1);
    for (int k = 0; k < size; ++k) {
        const int ci = pick(rng);
        const auto& labels = cases[static_cast<std::size_t>(ci)].labels;
        require(!labels.empty(), ErrorCode::CaseWithoutLabels,
                "case " + cases[static_cast<std::size_t>(ci)].id + " has no label pairs");
        int total = 0;
        for (const auto& l : labels) total += l.high_confidence ? 2 : 1;
        int r = std::uniform_int_distribution<int>(0, total - 1)(rng);
        int li = 0;
        for (; li < static_cast<int>(labels.size()); ++li) {
            r -= labels[static_cast<std::size_t>(li)].high_confidence ? 2 : 1;
            if (r < 0) break;
        }
        out.push_back({ci, li});
    }
    return out;
}

// ------------------------------------------------------------ augmentation

/// Random small affine applied to the fixed image and every fixed label
/// (masks re-binarised, then all labels re-smoothed). The moving side is
/// left alone.
template <typename Rng>
Case augment_pair(const Case& c, Rng& rng, double magnitude) {
    if (magnitude == 0.0) return c;
    auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    const double pi = std::acos(-1.0);
    std::array<double, 3> angle{}, scale{}, shift{};
    for (int a = 0; a < 3; ++a) {
        angle[static_cast<std::size_t>(a)] = u(-1, 1) * magnitude * 10.0 * pi / 180.0 / std::sqrt(3.0);
        scale[static_cast<std::size_t>(a)] = 1.0 + u(-1, 1) * magnitude * 0.1;
        shift[static_cast<std::size_t>(a)] = u(-1, 1) * magnitude * 0.05 * c.fixed.shape[a] / std::sqrt(3.0);
    }
    // R = Rz Ry Rx, then per-axis scale.
    const double cx = std::cos(angle[0]), sx = std::sin(angle[0]);
    const double cy = std::cos(angle[1]), sy = std::sin(angle[1]);
    const double cz = std::cos(angle[2]), sz = std::sin(angle[2]);
    const double R[9] = {cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx,
                         sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx,
                         -sy,     cy * sx,                cy * cx};
    AffineParams p;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j)
            p.values[static_cast<std::size_t>(4 * i + j)] = R[3 * i + j] * scale[static_cast<std::size_t>(j)];
        p.values[static_cast<std::size_t>(4 * i + 3)] = shift[static_cast<std::size_t>(i)];
    }
    const auto field = affine_grid(p, c.fixed.shape, c.fixed.spacing);
    Case out = c;
    out.fixed = warp_trilinear(c.fixed, field);
    for (auto& l : out.labels) l.fixed = binarized(warp_trilinear(l.fixed, field));
    bool all_present = true;
    for (const auto& l : out.labels) all_present = all_present && foreground_count(l.fixed) > 0;
    if (!all_present) return c; // a label left the volume; skip this draw
    smooth_case(out);
    return out;
}

// --------------------------------------------------------------- iteration

struct LossBreakdown {
    double total = 0.0;
    double cross_entropy = 0.0;
    double regulariser = 0.0; // bending (and optional L2 gradient) term, weighted
    double weight_decay = 0.0; // weighted
};

template <typename T>
struct IterationResult {
    LossBreakdown loss;
    std::map<std::string, Tensor<T>> gradients; // trainable parameters of the stage
};

namespace detail {
template <typename T>
void copy_into(const Volume& v, T* dst) {
    for (std::size_t i = 0; i < v.size(); ++i) dst[i] = static_cast<T>(v.data[i]);
}
} // namespace detail

/// Forward and backward for one minibatch. All drawn cases must share
/// moving and fixed shapes.
template <typename T>
IterationResult<T> loss_and_gradients(const std::vector<const Case*>& items, const std::vector<int>& label_indices,
                                      NetworkParameters<T>& params, const NetworkConfig& net, const LossWeights& w,
                                      Stage stage) {
    require(!items.empty() && items.size() == label_indices.size(), ErrorCode::InvalidArgument, "empty minibatch");
    const Shape3 ms = items.front()->moving.shape, fs_ = items.front()->fixed.shape;
    const int n = static_cast<int>(items.size());
    Tensor<T> moving(Dims5{n, 1, ms[0], ms[1], ms[2]}), moving_label(moving.dims);
    Tensor<T> resized(Dims5{n, 1, fs_[0], fs_[1], fs_[2]}), fixed(resized.dims), fixed_label(resized.dims);
    for (int k = 0; k < n; ++k) {
        const Case& c = *items[static_cast<std::size_t>(k)];
        require(c.moving.shape == ms && c.fixed.shape == fs_, ErrorCode::ShapeMismatch,
                "minibatch cases must share image shapes");
        require(c.smoothed(), ErrorCode::InvalidArgument, "case " + c.id + " has no smoothed label maps");
        const auto& l = c.labels.at(static_cast<std::size_t>(label_indices[static_cast<std::size_t>(k)]));
        const Volume m = normalize_intensity(c.moving);
        detail::copy_into(m, moving.item(k));
        detail::copy_into(resize_linear(m, fs_), resized.item(k));
        detail::copy_into(normalize_intensity(c.fixed), fixed.item(k));
        detail::copy_into(l.moving_smooth, moving_label.item(k));
        detail::copy_into(l.fixed_smooth, fixed_label.item(k));
    }

    Tape<T> tape;
    ParameterBinder<T> bind(tape, params, true);
    const Var vm = tape.constant(std::move(moving));
    const Var vr = tape.constant(std::move(resized));
    const Var vf = tape.constant(std::move(fixed));
    const Variant variant = stage == Stage::GlobalOnly ? Variant::Global : Variant::Composite;
    const auto fwd = ops::registration_forward(bind, vm, vr, vf, Mode::Train, net, variant);

    // Smoothed maps are nonzero up to the volume edge, so zero padding would
    // charge the clamp penalty for every voxel sampled from outside.
    const Var warped = ops::warp(tape, tape.constant(std::move(moving_label)), fwd.ddf, Padding::Border);
    const Var ce = ops::label_cross_entropy(tape, warped, tape.constant(std::move(fixed_label)), w.clamp_epsilon);
    std::vector<Var> terms{ce};
    std::vector<double> weights{1.0};
    if (stage == Stage::Joint) {
        const Var residual = ops::sub(tape, fwd.ddf, fwd.affine);
        if (w.bending_weight != 0.0) {
            terms.push_back(ops::field_regulariser(tape, residual, false));
            weights.push_back(w.bending_weight);
        }
        if (w.l2_gradient_weight != 0.0) {
            terms.push_back(ops::field_regulariser(tape, residual, true));
            weights.push_back(w.l2_gradient_weight);
        }
    }
    const Var total = ops::weighted_sum(tape, terms, weights);
    tape.backward(total);

    IterationResult<T> out;
    out.loss.cross_entropy = double(tape.value(ce).data[0]);
    out.loss.regulariser = double(tape.value(total).data[0]) - out.loss.cross_entropy;
    double decay = 0.0;
    for (auto& [name, g] : bind.gradients()) {
        if (!NetworkParameters<T>::is_trainable(name)) continue;
        if (NetworkParameters<T>::is_decayed(name) && w.weight_decay != 0.0) {
            const auto& p = params.at(name);
            for (std::size_t i = 0; i < g.size(); ++i) {
                decay += double(p.data[i]) * double(p.data[i]);
                g.data[i] = static_cast<T>(double(g.data[i]) + 2.0 * w.weight_decay * double(p.data[i]));
            }
        }
        out.gradients.emplace(name, std::move(g));
    }
    out.loss.weight_decay = w.weight_decay * decay;
    out.loss.total = double(tape.value(total).data[0]) + out.loss.weight_decay;
    bool finite = std::isfinite(out.loss.total);
    std::string bad;
    for (const auto& [name, g] : out.gradients)
        for (T v : g.data)
            if (!std::isfinite(double(v))) {
                finite = false;
                bad = name;
                break;
            }
    if (!finite) {
        std::ostringstream msg;
        msg << "non-finite loss or gradient (stage " << to_string(stage) << ", ce " << out.loss.cross_entropy
            << ", regulariser " << out.loss.regulariser << ", weight decay " << out.loss.weight_decay;
        if (!bad.empty()) msg << ", first bad gradient " << bad;
        msg << ")";
        fail(ErrorCode::NonFiniteLoss, msg.str());
    }
    return out;
}

/// One optimiser step. During the global-only stage the local-net is not
/// evaluated, so its parameters and running statistics stay untouched.
template <typename T>
LossBreakdown train_iteration(const std::vector<const Case*>& items, const std::vector<int>& label_indices,
                              NetworkParameters<T>& params, AdamState<T>& adam, const NetworkConfig& net,
                              const LossWeights& w, double lr, Stage stage) {
    auto r = loss_and_gradients(items, label_indices, params, net, w, stage);
    adam_step(params, r.gradients, adam, lr);
    return r.loss;
}

// -------------------------------------------------------------------- loop

struct TrainOptions {
    std::filesystem::path out_dir;                     // checkpoints and log; empty: keep in memory
    std::optional<Checkpoint> resume;                  // continue from here
    std::int64_t stop_after = -1;                      // stop once this many iterations are done
    std::function<void(const nlohmann::json&)> on_record; // each log record
    const std::vector<Case>* validation = nullptr;
};

inline std::string rng_state_of(const std::mt19937_64& rng) {
    std::ostringstream s;
    s << rng;
    return s.str();
}

inline std::mt19937_64 rng_from_state(const std::string& state) {
    std::mt19937_64 rng;
    std::istringstream s(state);
    s >> rng;
    require(!s.fail(), ErrorCode::CheckpointMismatch, "unreadable sampler state in checkpoint");
    return rng;
}

/// Gland cross-entropy of the composite variant in inference mode, mean over cases.
inline double validation_loss(const std::vector<Case>& cases, NetworkParameters<float>& params,
                              const NetworkConfig& net, const LossWeights& w) {
    double total = 0.0;
    for (const auto& c : cases) {
        Tape<float> tape;
        ParameterBinder<float> bind(tape, params, false);
        const Volume m = normalize_intensity(c.moving);
        auto tensor_of = [](const Volume& v) { return stack_channels<float, float>({&v}); };
        const auto fwd = ops::registration_forward(bind, tape.constant(tensor_of(m)),
                                                   tape.constant(tensor_of(resize_linear(m, c.fixed.shape))),
                                                   tape.constant(tensor_of(normalize_intensity(c.fixed))), Mode::Infer,
                                                   net, Variant::Composite);
        const auto& g = c.labels.at(static_cast<std::size_t>(c.gland_index()));
        const Var warped = ops::warp(tape, tape.constant(tensor_of(g.moving_smooth)), fwd.ddf, Padding::Border);
        const Var ce = ops::label_cross_entropy(tape, warped, tape.constant(tensor_of(g.fixed_smooth)), w.clamp_epsilon);
        total += double(tape.value(ce).data[0]);
    }
    return cases.empty() ? 0.0 : total / static_cast<double>(cases.size());
}

inline Checkpoint make_checkpoint(const TrainConfig& cfg, const NetworkConfig& net, std::int64_t iteration,
                                  const std::mt19937_64& rng, const NetworkParameters<float>& params,
                                  const AdamState<float>& adam) {
    Checkpoint ck;
    ck.config = {{"train", cfg}, {"network", network_json(net)}};
    ck.iteration = iteration;
    ck.rng_state = rng_state_of(rng);
    ck.params = params;
    ck.adam = adam;
    return ck;
}

/// Global-only stage for the first global_warmup_iters iterations, joint
/// afterwards. Writes DIR/train_log.jsonl, DIR/checkpoint_<it>.bin every
/// checkpoint_every iterations and DIR/final.bin. Deterministic in the seed.
inline Checkpoint train(std::vector<Case> cases, const TrainConfig& cfg, const TrainOptions& opt = {}) {
    validate(cfg);
    require(!cases.empty(), ErrorCode::EmptyDataset, "no training cases");
    for (auto& c : cases) {
        validate_case(c);
        if (!c.smoothed()) smooth_case(c);
    }
    const NetworkConfig net = network_config(cfg, cases.front().fixed.shape);

    NetworkParameters<float> params;
    AdamState<float> adam;
    std::int64_t it = 0;
    std::mt19937_64 rng(cfg.seed ^ 0x6c64726567ULL);
    if (opt.resume) {
        const auto& ck = *opt.resume;
        require(ck.config.contains("network") && network_from_json(ck.config["network"]).input_shape == net.input_shape,
                ErrorCode::CheckpointMismatch, "checkpoint was trained on a different input shape");
        params = ck.params;
        adam = ck.adam;
        it = ck.iteration;
        rng = rng_from_state(ck.rng_state);
    } else {
        params = init_params<float>(cfg.seed, net);
    }

    std::ofstream log;
    if (!opt.out_dir.empty()) {
        std::filesystem::create_directories(opt.out_dir);
        log.open(opt.out_dir / "train_log.jsonl", opt.resume ? std::ios::app : std::ios::trunc);
        require(static_cast<bool>(log), ErrorCode::IoFailure, "cannot open training log in " + opt.out_dir.string());
    }
    auto emit = [&](const nlohmann::json& rec) {
        if (log.is_open()) log << rec.dump() << '\n' << std::flush;
        if (opt.on_record) opt.on_record(rec);
    };

    const std::int64_t end = opt.stop_after >= 0 ? std::min<std::int64_t>(opt.stop_after, cfg.total_iters)
                                                 : static_cast<std::int64_t>(cfg.total_iters);
    while (it < end) {
        const Stage stage = it < cfg.global_warmup_iters ? Stage::GlobalOnly : Stage::Joint;
        const auto draws = sample_minibatch(cases, cfg.minibatch_size, rng);
        std::vector<Case> augmented;
        std::vector<const Case*> items;
        std::vector<int> labels;
        if (cfg.augment) augmented.reserve(draws.size());
        for (const auto& d : draws) {
            const Case& c = cases[static_cast<std::size_t>(d.case_index)];
            if (cfg.augment) {
                augmented.push_back(augment_pair(c, rng, cfg.augment_magnitude));
                items.push_back(&augmented.back());
            } else {
                items.push_back(&c);
            }
            labels.push_back(d.label_index);
        }
        const auto loss = train_iteration(items, labels, params, adam, net, cfg.weights, cfg.learning_rate, stage);
        const bool stage_start = it == 0 || it == cfg.global_warmup_iters;
        if (it % cfg.log_every == 0 || stage_start || it + 1 == cfg.total_iters)
            emit({{"iteration", it},
                  {"stage", to_string(stage)},
                  {"loss", loss.total},
                  {"cross_entropy", loss.cross_entropy},
                  {"regulariser", loss.regulariser},
                  {"weight_decay", loss.weight_decay}});
        ++it;
        if (cfg.validate_every > 0 && opt.validation != nullptr && it % cfg.validate_every == 0)
            emit({{"iteration", it - 1}, {"validation_cross_entropy", validation_loss(*opt.validation, params, net, cfg.weights)}});
        if (cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && !opt.out_dir.empty())
            save_checkpoint(make_checkpoint(cfg, net, it, rng, params, adam),
                            opt.out_dir / ("checkpoint_" + std::to_string(it) + ".bin"));
    }
    auto ck = make_checkpoint(cfg, net, it, rng, params, adam);
    if (!opt.out_dir.empty()) save_checkpoint(ck, opt.out_dir / "final.bin");
    return ck;
}

} // namespace ldreg
