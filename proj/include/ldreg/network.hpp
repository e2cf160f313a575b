#pragma once

// Global-net (affine regressor) and local-net (encoder-decoder DDF
// predictor). Both share a four-level down-sampling encoder:
//
//   init:   conv3 (2 -> n0) -> BN -> relu
//   down k: resnet(n_k) -> [skip_k] -> conv3 stride 2 (n_k -> 2 n_k) -> BN -> relu
//
// global-net: flatten the level-4 features -> fully connected -> 12 values.
// local-net:  up k (k = 3..0): tconv stride 2 (n_{k+1} -> n_k) -> BN -> relu
//             -> resnet(n_k) -> + skip_k; then conv3 (n0 -> 3) + bias.

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "ldreg/batch_norm.hpp"
#include "ldreg/conv.hpp"
#include "ldreg/error.hpp"
#include "ldreg/spatial_transform.hpp"
#include "ldreg/tape.hpp"

namespace ldreg {

inline constexpr int kLevels = 4;
inline constexpr int kShapeMultiple = 1 << kLevels;

struct NetworkConfig {
    int global_channels = 4; // n0 of the global-net
    int local_channels = 32; // n0 of the local-net
    Shape3 input_shape{16, 16, 16}; // padded network input, multiple of 16
    double output_init_std = 1e-7; // std of the global FC and local output weights
    // Fixed multipliers on the FC outputs: matrix entries, and translation in
    // voxels per unit. They set how far one optimiser step moves the affine.
    double affine_matrix_scale = 1.0;
    double affine_translation_scale = 1.0;
    BatchNormSettings batch_norm{};
};

/// Smallest multiple of 16 >= each extent.
inline Shape3 padded_shape(const Shape3& s) {
    Shape3 out{};
    for (int a = 0; a < 3; ++a) out[a] = (s[a] + kShapeMultiple - 1) / kShapeMultiple * kShapeMultiple;
    return out;
}

inline std::vector<double> affine_output_scales(const NetworkConfig& cfg) {
    std::vector<double> s(12, cfg.affine_matrix_scale);
    for (int r = 0; r < 3; ++r) s[static_cast<std::size_t>(4 * r + 3)] = cfg.affine_translation_scale;
    return s;
}

inline void require_divisible(const Shape3& s) {
    for (int a = 0; a < 3; ++a)
        require(s[a] % kShapeMultiple == 0, ErrorCode::IndivisibleShape,
                "network input " + shape_string(s) + " must be divisible by 16");
}

template <typename T>
struct NetworkParameters {
    std::map<std::string, Tensor<T>> tensors;

    Tensor<T>& at(const std::string& name) {
        auto it = tensors.find(name);
        require(it != tensors.end(), ErrorCode::CheckpointMismatch, "missing parameter " + name);
        return it->second;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = tensors.find(name);
        require(it != tensors.end(), ErrorCode::CheckpointMismatch, "missing parameter " + name);
        return it->second;
    }

    static bool is_trainable(const std::string& name) { return name.find("running_") == std::string::npos; }
    static bool is_decayed(const std::string& name) { return name.size() > 2 && name.ends_with(".w"); }

    /// Sum of squares over decayed weights (conv kernels and the FC matrix).
    double decayed_sq_norm(const std::string& prefix = "") const {
        double total = 0.0;
        for (const auto& [name, t] : tensors) {
            if (!is_decayed(name) || !name.starts_with(prefix)) continue;
            for (T v : t.data) total += double(v) * double(v);
        }
        return total;
    }
};

/// Binds named parameters to a tape on first use and collects their
/// gradients after backward.
template <typename T>
class ParameterBinder {
public:
    ParameterBinder(Tape<T>& tape, NetworkParameters<T>& params, bool track_gradients)
        : tape_(tape), params_(params), track_(track_gradients) {}

    Var operator()(const std::string& name) {
        auto it = vars_.find(name);
        if (it != vars_.end()) return it->second;
        const Var v = tape_.parameter(params_.at(name), track_);
        vars_.emplace(name, v);
        return v;
    }

    Tensor<T>& running(const std::string& name) { return params_.at(name); }
    Tape<T>& tape() { return tape_; }

    /// Gradients of every bound parameter that received one.
    std::map<std::string, Tensor<T>> gradients() {
        std::map<std::string, Tensor<T>> out;
        for (const auto& [name, v] : vars_)
            if (tape_.has_grad(v)) out.emplace(name, tape_.grad(v));
        return out;
    }

    const std::map<std::string, Var>& bound() const { return vars_; }

private:
    Tape<T>& tape_;
    NetworkParameters<T>& params_;
    bool track_;
    std::map<std::string, Var> vars_;
};

namespace detail {

template <typename T, typename Rng>
void fill_normal(Tensor<T>& t, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data) v = static_cast<T>(dist(rng));
}

template <typename T, typename Rng>
void add_conv(NetworkParameters<T>& p, const std::string& name, int cin, int cout, int k, Rng& rng) {
    Tensor<T> w(Dims5{cout, cin, k, k, k});
    fill_normal(w, std::sqrt(2.0 / (cin * k * k * k)), rng);
    p.tensors[name + ".w"] = std::move(w);
    p.tensors[name + ".b"] = Tensor<T>(Dims5{1, cout, 1, 1, 1});
}

template <typename T, typename Rng>
void add_transpose_conv(NetworkParameters<T>& p, const std::string& name, int cin, int cout, Rng& rng) {
    Tensor<T> w(Dims5{cin, cout, 3, 3, 3});
    fill_normal(w, std::sqrt(2.0 / (cin * 27)), rng);
    p.tensors[name + ".w"] = std::move(w);
    p.tensors[name + ".b"] = Tensor<T>(Dims5{1, cout, 1, 1, 1});
}

template <typename T>
void add_bn(NetworkParameters<T>& p, const std::string& name, int c) {
    p.tensors[name + ".scale"] = Tensor<T>(Dims5{1, c, 1, 1, 1}, T(1));
    p.tensors[name + ".offset"] = Tensor<T>(Dims5{1, c, 1, 1, 1}, T(0));
    p.tensors[name + ".running_mean"] = Tensor<T>(Dims5{1, c, 1, 1, 1}, T(0));
    p.tensors[name + ".running_var"] = Tensor<T>(Dims5{1, c, 1, 1, 1}, T(1));
}

template <typename T, typename Rng>
void add_resnet(NetworkParameters<T>& p, const std::string& name, int c, Rng& rng) {
    add_conv(p, name + ".conv1", c, c, 3, rng);
    add_bn(p, name + ".bn1", c);
    add_conv(p, name + ".conv2", c, c, 3, rng);
    add_bn(p, name + ".bn2", c);
}

template <typename T, typename Rng>
void add_encoder(NetworkParameters<T>& p, const std::string& prefix, int n0, Rng& rng) {
    add_conv(p, prefix + ".init", 2, n0, 3, rng);
    add_bn(p, prefix + ".init.bn", n0);
    for (int k = 0; k < kLevels; ++k) {
        const int c = n0 << k;
        const std::string level = prefix + ".down" + std::to_string(k);
        add_resnet(p, level + ".res", c, rng);
        add_conv(p, level + ".stride", c, 2 * c, 3, rng);
        add_bn(p, level + ".stride.bn", 2 * c);
    }
}

} // namespace detail

/// Deterministic initialisation. Interior convolutions: N(0, 2 / fan_in);
/// batch norm: scale 1, offset 0, running stats (0, 1); global FC weights
/// N(0, output_init_std^2) with bias giving identity [I | 0]; local output conv
/// N(0, output_init_std^2) with zero bias.
template <typename T = float>
NetworkParameters<T> init_params(std::uint64_t seed, const NetworkConfig& cfg) {
    require_divisible(cfg.input_shape);
    require(cfg.global_channels > 0 && cfg.local_channels > 0, ErrorCode::InvalidArgument, "channel counts must be positive");
    std::mt19937_64 rng(seed);
    NetworkParameters<T> p;

    detail::add_encoder(p, "global", cfg.global_channels, rng);
    const int bottom = cfg.global_channels << kLevels;
    const auto s = cfg.input_shape;
    const int flat = bottom * (s[0] >> kLevels) * (s[1] >> kLevels) * (s[2] >> kLevels);
    Tensor<T> fc(Dims5{12, flat, 1, 1, 1});
    detail::fill_normal(fc, cfg.output_init_std, rng);
    p.tensors["global.fc.w"] = std::move(fc);
    Tensor<T> fc_b(Dims5{1, 12, 1, 1, 1});
    const AffineParams identity;
    const auto scales = affine_output_scales(cfg);
    for (std::size_t k = 0; k < 12; ++k) fc_b.data[k] = static_cast<T>(identity.values[k] / scales[k]);
    p.tensors["global.fc.b"] = std::move(fc_b);

    detail::add_encoder(p, "local", cfg.local_channels, rng);
    for (int k = kLevels - 1; k >= 0; --k) {
        const int c = cfg.local_channels << k;
        const std::string level = "local.up" + std::to_string(k);
        detail::add_transpose_conv(p, level + ".tconv", 2 * c, c, rng);
        detail::add_bn(p, level + ".tconv.bn", c);
        detail::add_resnet(p, level + ".res", c, rng);
    }
    Tensor<T> out(Dims5{3, cfg.local_channels, 3, 3, 3});
    detail::fill_normal(out, cfg.output_init_std, rng);
    p.tensors["local.out.w"] = std::move(out);
    p.tensors["local.out.b"] = Tensor<T>(Dims5{1, 3, 1, 1, 1});
    return p;
}

namespace ops {

template <typename T>
Var conv_bn_relu(ParameterBinder<T>& bind, Var x, const std::string& conv, const std::string& bn, Mode mode,
                 const NetworkConfig& cfg, int stride = 1, bool transpose = false) {
    auto& tape = bind.tape();
    Var h = transpose ? conv3d_transpose(tape, x, bind(conv + ".w"), bind(conv + ".b"))
                      : conv3d(tape, x, bind(conv + ".w"), bind(conv + ".b"), stride);
    h = batch_norm(tape, h, bind(bn + ".scale"), bind(bn + ".offset"), bind.running(bn + ".running_mean"),
                   bind.running(bn + ".running_var"), mode, cfg.batch_norm);
    return relu(tape, h);
}

/// y = relu(x + BN(conv(relu(BN(conv(x)))))).
template <typename T>
Var resnet_block(ParameterBinder<T>& bind, Var x, const std::string& name, Mode mode, const NetworkConfig& cfg) {
    auto& tape = bind.tape();
    Var h = conv_bn_relu(bind, x, name + ".conv1", name + ".bn1", mode, cfg);
    h = conv3d(tape, h, bind(name + ".conv2.w"), bind(name + ".conv2.b"), 1);
    h = batch_norm(tape, h, bind(name + ".bn2.scale"), bind(name + ".bn2.offset"), bind.running(name + ".bn2.running_mean"),
                   bind.running(name + ".bn2.running_var"), mode, cfg.batch_norm);
    return relu(tape, add(tape, x, h));
}

/// Runs the encoder; returns the level-4 features and fills `skips` with the
/// resnet outputs of levels 0..3.
template <typename T>
Var encoder(ParameterBinder<T>& bind, Var pair, const std::string& prefix, Mode mode, const NetworkConfig& cfg,
            std::vector<Var>* skips) {
    const auto& in = bind.tape().value(pair);
    require(in.dims.c == 2, ErrorCode::ShapeMismatch, "networks take exactly a 2-channel image pair");
    require_divisible(in.dims.shape3());
    Var h = conv_bn_relu(bind, pair, prefix + ".init", prefix + ".init.bn", mode, cfg);
    for (int k = 0; k < kLevels; ++k) {
        const std::string level = prefix + ".down" + std::to_string(k);
        h = resnet_block(bind, h, level + ".res", mode, cfg);
        if (skips != nullptr) skips->push_back(h);
        h = conv_bn_relu(bind, h, level + ".stride", level + ".stride.bn", mode, cfg, 2);
    }
    return h;
}

/// (n, 2, X, Y, Z) image pair -> (n, 12, 1, 1, 1) affine parameters.
template <typename T>
Var global_net(ParameterBinder<T>& bind, Var pair, Mode mode, const NetworkConfig& cfg) {
    Var h = encoder(bind, pair, "global", mode, cfg, nullptr);
    const auto& W = bind.tape().value(bind("global.fc.w"));
    const auto& f = bind.tape().value(h);
    require(static_cast<std::size_t>(W.dims.c) == static_cast<std::size_t>(f.dims.c) * f.dims.spatial(),
            ErrorCode::CheckpointMismatch, "global-net input shape differs from the one it was built for");
    Var theta = dense(bind.tape(), h, bind("global.fc.w"), bind("global.fc.b"));
    const auto s = affine_output_scales(cfg);
    if (std::all_of(s.begin(), s.end(), [](double v) { return v == 1.0; })) return theta;
    return scale_channels(bind.tape(), theta, s);
}

/// (n, 2, X, Y, Z) image pair -> (n, 3, X, Y, Z) displacement field.
template <typename T>
Var local_net(ParameterBinder<T>& bind, Var pair, Mode mode, const NetworkConfig& cfg) {
    auto& tape = bind.tape();
    std::vector<Var> skips;
    Var h = encoder(bind, pair, "local", mode, cfg, &skips);
    for (int k = kLevels - 1; k >= 0; --k) {
        const std::string level = "local.up" + std::to_string(k);
        h = conv_bn_relu(bind, h, level + ".tconv", level + ".tconv.bn", mode, cfg, 2, true);
        h = resnet_block(bind, h, level + ".res", mode, cfg);
        h = add(tape, h, skips[static_cast<std::size_t>(k)]);
    }
    return conv3d(tape, h, bind("local.out.w"), bind("local.out.b"), 1);
}

} // namespace ops

template <typename T>
std::vector<AffineParams> affine_params_of(const Tensor<T>& theta) {
    std::vector<AffineParams> out(static_cast<std::size_t>(theta.dims.n));
    for (int n = 0; n < theta.dims.n; ++n)
        for (std::size_t k = 0; k < 12; ++k)
            out[static_cast<std::size_t>(n)].values[k] = double(theta.data[static_cast<std::size_t>(n) * 12 + k]);
    return out;
}

template <typename T>
BasicDisplacementField<T> field_of(const Tensor<T>& f, int n = 0) {
    require(f.dims.c == 3, ErrorCode::ShapeMismatch, "field tensor needs 3 channels");
    BasicDisplacementField<T> out(f.dims.shape3());
    for (int c = 0; c < 3; ++c) std::copy_n(f.channel(n, c), f.dims.spatial(), out[c].data.begin());
    return out;
}

/// Single-pass forward of the global-net on one image pair.
template <typename T>
AffineParams global_net_forward(const Tensor<T>& pair, NetworkParameters<T>& params, Mode mode,
                                const NetworkConfig& cfg) {
    Tape<T> tape;
    ParameterBinder<T> bind(tape, params, false);
    const Var theta = ops::global_net(bind, tape.constant(pair), mode, cfg);
    return affine_params_of(tape.value(theta)).front();
}

/// Single-pass forward of the local-net; returns the field of batch item 0.
template <typename T>
BasicDisplacementField<T> local_net_forward(const Tensor<T>& pair, NetworkParameters<T>& params, Mode mode,
                                            const NetworkConfig& cfg) {
    Tape<T> tape;
    ParameterBinder<T> bind(tape, params, false);
    const Var ddf = ops::local_net(bind, tape.constant(pair), mode, cfg);
    return field_of(tape.value(ddf));
}

} // namespace ldreg
