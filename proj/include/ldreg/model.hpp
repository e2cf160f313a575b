#pragma once

// The registration graph shared by training and inference:
//
//   global:    theta = global_net(resize(moving) ++ fixed); ddf = affine(theta)
//   composite: local = local_net(warp(moving, affine(theta)) ++ fixed);
//              ddf = compose(theta, local)
//   local:     ddf = local_net(resize(moving) ++ fixed)
//
// Network inputs are zero-padded at the high end up to a multiple of 16 and
// the local field is cropped back to the fixed grid.

#include <string>

#include "ldreg/error.hpp"
#include "ldreg/network.hpp"
#include "ldreg/spatial_ops.hpp"
#include "ldreg/tape.hpp"

namespace ldreg {

enum class Variant { Composite, Global, Local };

inline std::string to_string(Variant v) {
    switch (v) {
    case Variant::Composite: return "composite";
    case Variant::Global: return "global";
    case Variant::Local: return "local";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "composite") return Variant::Composite;
    if (s == "global") return Variant::Global;
    if (s == "local") return Variant::Local;
    fail(ErrorCode::InvalidArgument, "unknown variant '" + s + "' (composite|global|local)");
}

struct ForwardVars {
    Var theta;  // (n, 12, 1, 1, 1); invalid for the local variant
    Var affine; // affine part of the field; invalid for the local variant
    Var local;  // local-net field; invalid for the global variant
    Var ddf;    // final field on the fixed grid
};

namespace ops {

template <typename T>
Var network_input(Tape<T>& tape, Var a, Var b) {
    const Var pair = concat_channels(tape, a, b);
    return pad_spatial(tape, pair, padded_shape(tape.value(a).dims.shape3()));
}

/// `moving` (n, 1, moving grid); `moving_resized` and `fixed` (n, 1, fixed grid).
template <typename T>
ForwardVars registration_forward(ParameterBinder<T>& bind, Var moving, Var moving_resized, Var fixed, Mode mode,
                                 const NetworkConfig& cfg, Variant variant) {
    auto& tape = bind.tape();
    const Shape3 fixed_shape = tape.value(fixed).dims.shape3();
    require(tape.value(moving_resized).dims.shape3() == fixed_shape, ErrorCode::ShapeMismatch,
            "resized moving image must be on the fixed grid");
    ForwardVars out;
    if (variant == Variant::Local) {
        const Var u = local_net(bind, network_input(tape, moving_resized, fixed), mode, cfg);
        out.local = crop_spatial(tape, u, fixed_shape);
        out.ddf = out.local;
        return out;
    }
    out.theta = global_net(bind, network_input(tape, moving_resized, fixed), mode, cfg);
    out.affine = affine_field(tape, out.theta, fixed_shape);
    if (variant == Variant::Global) {
        out.ddf = out.affine;
        return out;
    }
    const Var pre_warped = warp(tape, moving, out.affine);
    const Var u = local_net(bind, network_input(tape, pre_warped, fixed), mode, cfg);
    out.local = crop_spatial(tape, u, fixed_shape);
    out.ddf = compose_field(tape, out.theta, out.local);
    return out;
}

} // namespace ops
} // namespace ldreg
