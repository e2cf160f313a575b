#pragma once

// Tape wrappers around the spatial transforms and losses. Fields are
// (n, 3, X, Y, Z) tensors, affine parameters (n, 12, 1, 1, 1).

#include <array>

#include "ldreg/losses.hpp"
#include "ldreg/spatial_transform.hpp"
#include "ldreg/tape.hpp"

namespace ldreg::ops {

namespace detail {
template <typename T>
std::array<double, 12> theta_of(const Tensor<T>& theta, int n) {
    std::array<double, 12> out{};
    for (std::size_t k = 0; k < 12; ++k) out[k] = double(theta.data[static_cast<std::size_t>(n) * 12 + k]);
    return out;
}

template <typename T>
void require_field(const Tensor<T>& f, const char* what) {
    require(f.dims.c == 3, ErrorCode::ShapeMismatch, std::string(what) + ": field needs 3 channels, got " + f.dims.str());
}

template <typename T>
void require_theta(const Tensor<T>& t, const char* what) {
    require(t.dims.c == 12 && t.dims.spatial() == 1, ErrorCode::ShapeMismatch,
            std::string(what) + ": affine needs (n, 12, 1, 1, 1), got " + t.dims.str());
}
} // namespace detail

template <typename T>
Var affine_field(Tape<T>& tape, Var theta, const Shape3& shape) {
    const auto& th = tape.value(theta);
    detail::require_theta(th, "affine_field");
    Tensor<T> out(Dims5{th.dims.n, 3, shape[0], shape[1], shape[2]});
    for (int n = 0; n < th.dims.n; ++n) {
        const auto p = detail::theta_of(th, n);
        kernels::affine_grid(p.data(), shape, out.channel(n, 0), out.channel(n, 1), out.channel(n, 2));
    }
    const int id = static_cast<int>(tape.size());
    return tape.push(std::move(out), tape.requires_grad(theta), [theta, id, shape](Tape<T>& t) {
        const auto& g = t.grad(Var{id});
        auto& gt = t.grad(theta);
        for (int n = 0; n < g.dims.n; ++n) {
            std::array<double, 12> acc{};
            kernels::affine_grid_vjp(shape, g.channel(n, 0), g.channel(n, 1), g.channel(n, 2), acc.data());
            for (std::size_t k = 0; k < 12; ++k) gt.data[static_cast<std::size_t>(n) * 12 + k] += static_cast<T>(acc[k]);
        }
    });
}

/// Displacement of c -> A (c + u(c)) + t.
template <typename T>
Var compose_field(Tape<T>& tape, Var theta, Var local) {
    const auto& th = tape.value(theta);
    const auto& u = tape.value(local);
    detail::require_theta(th, "compose_field");
    detail::require_field(u, "compose_field");
    require(th.dims.n == u.dims.n, ErrorCode::ShapeMismatch, "compose_field: batch sizes differ");
    const Shape3 shape = u.dims.shape3();
    Tensor<T> out(u.dims);
    for (int n = 0; n < u.dims.n; ++n) {
        const auto p = detail::theta_of(th, n);
        kernels::compose(p.data(), shape, u.channel(n, 0), u.channel(n, 1), u.channel(n, 2), out.channel(n, 0),
                         out.channel(n, 1), out.channel(n, 2));
    }
    const int id = static_cast<int>(tape.size());
    return tape.push(std::move(out), any_requires_grad(tape, {theta, local}), [theta, local, id, shape](Tape<T>& t) {
        const auto& g = t.grad(Var{id});
        const auto& th = t.value(theta);
        const auto& u = t.value(local);
        const bool want_local = t.requires_grad(local);
        for (int n = 0; n < g.dims.n; ++n) {
            const auto p = detail::theta_of(th, n);
            std::array<double, 12> acc{};
            T* gl[3] = {nullptr, nullptr, nullptr};
            if (want_local) {
                auto& gu = t.grad(local);
                for (int c = 0; c < 3; ++c) gl[c] = gu.channel(n, c);
            }
            kernels::compose_vjp(p.data(), shape, u.channel(n, 0), u.channel(n, 1), u.channel(n, 2), g.channel(n, 0),
                                 g.channel(n, 1), g.channel(n, 2), acc.data(), gl[0], gl[1], gl[2]);
            if (t.requires_grad(theta)) {
                auto& gt = t.grad(theta);
                for (std::size_t k = 0; k < 12; ++k)
                    gt.data[static_cast<std::size_t>(n) * 12 + k] += static_cast<T>(acc[k]);
            }
        }
    });
}

/// Pull-back trilinear warp of every channel of `src` by `ddf`; output
/// lives on the field grid.
template <typename T>
Var warp(Tape<T>& tape, Var src, Var ddf, Padding pad = Padding::Zero) {
    const auto& s = tape.value(src);
    const auto& f = tape.value(ddf);
    detail::require_field(f, "warp");
    require(s.dims.n == f.dims.n, ErrorCode::ShapeMismatch, "warp: batch sizes differ");
    const Shape3 src_shape = s.dims.shape3(), out_shape = f.dims.shape3();
    Tensor<T> out(Dims5{s.dims.n, s.dims.c, out_shape[0], out_shape[1], out_shape[2]});
    for (int n = 0; n < s.dims.n; ++n)
        for (int c = 0; c < s.dims.c; ++c)
            kernels::warp(s.channel(n, c), src_shape, f.channel(n, 0), f.channel(n, 1), f.channel(n, 2), out_shape,
                          out.channel(n, c), pad);
    const int id = static_cast<int>(tape.size());
    return tape.push(std::move(out), any_requires_grad(tape, {src, ddf}),
                     [src, ddf, id, src_shape, out_shape, pad](Tape<T>& t) {
                         const auto& g = t.grad(Var{id});
                         const auto& s = t.value(src);
                         const auto& f = t.value(ddf);
                         const bool want_src = t.requires_grad(src), want_f = t.requires_grad(ddf);
                         for (int n = 0; n < g.dims.n; ++n)
                             for (int c = 0; c < g.dims.c; ++c) {
                                 T* gs = want_src ? t.grad(src).channel(n, c) : nullptr;
                                 T *gx = nullptr, *gy = nullptr, *gz = nullptr;
                                 if (want_f) {
                                     auto& gf = t.grad(ddf);
                                     gx = gf.channel(n, 0);
                                     gy = gf.channel(n, 1);
                                     gz = gf.channel(n, 2);
                                 }
                                 kernels::warp_vjp(s.channel(n, c), src_shape, f.channel(n, 0), f.channel(n, 1),
                                                   f.channel(n, 2), out_shape, g.channel(n, c), gs, gx, gy, gz,
                                                   pad);
                             }
                     });
}

/// Batch mean of the per-item label cross-entropy (prediction clamped).
template <typename T>
Var label_cross_entropy(Tape<T>& tape, Var prediction, Var target, double eps) {
    const auto& q = tape.value(prediction);
    const auto& p = tape.value(target);
    require(q.dims == p.dims, ErrorCode::ShapeMismatch,
            "label_cross_entropy: " + q.dims.str() + " vs " + p.dims.str());
    const std::size_t per_item = static_cast<std::size_t>(q.dims.c) * q.dims.spatial();
    double total = 0.0;
    for (int n = 0; n < q.dims.n; ++n) total += kernels::label_cross_entropy(q.item(n), p.item(n), per_item, eps);
    total /= q.dims.n;
    const int id = static_cast<int>(tape.size());
    return tape.push(Tensor<T>(Dims5{}, static_cast<T>(total)), tape.requires_grad(prediction),
                     [prediction, target, id, eps, per_item](Tape<T>& t) {
                         const auto& q = t.value(prediction);
                         const auto& p = t.value(target);
                         const double g = double(t.grad(Var{id}).data[0]) / q.dims.n;
                         auto& gq = t.grad(prediction);
                         for (int n = 0; n < q.dims.n; ++n)
                             kernels::label_cross_entropy_vjp(q.item(n), p.item(n), per_item, eps, g, gq.item(n));
                     });
}

/// Batch mean of bending energy (`l2 = true`: squared-gradient norm instead).
template <typename T>
Var field_regulariser(Tape<T>& tape, Var ddf, bool l2 = false) {
    const auto& f = tape.value(ddf);
    detail::require_field(f, "field_regulariser");
    const Shape3 shape = f.dims.shape3();
    for (int a = 0; a < 3; ++a)
        require(shape[a] >= 3, ErrorCode::GridTooSmall, "field regulariser needs every dimension >= 3");
    double total = 0.0;
    for (int n = 0; n < f.dims.n; ++n) {
        const T* comp[3] = {f.channel(n, 0), f.channel(n, 1), f.channel(n, 2)};
        total += l2 ? kernels::l2_displacement_gradient(shape, comp) : kernels::bending_energy(shape, comp);
    }
    total /= f.dims.n;
    const int id = static_cast<int>(tape.size());
    return tape.push(Tensor<T>(Dims5{}, static_cast<T>(total)), tape.requires_grad(ddf), [ddf, id, shape, l2](Tape<T>& t) {
        const auto& f = t.value(ddf);
        const double g = double(t.grad(Var{id}).data[0]) / f.dims.n;
        auto& gf = t.grad(ddf);
        for (int n = 0; n < f.dims.n; ++n) {
            const T* comp[3] = {f.channel(n, 0), f.channel(n, 1), f.channel(n, 2)};
            T* grad[3] = {gf.channel(n, 0), gf.channel(n, 1), gf.channel(n, 2)};
            if (l2)
                kernels::l2_displacement_gradient_vjp(shape, comp, g, grad);
            else
                kernels::bending_energy_vjp(shape, comp, g, grad);
        }
    });
}

} // namespace ldreg::ops
