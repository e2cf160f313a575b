#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "ldreg/error.hpp"
#include "ldreg/spatial_transform.hpp"
#include "ldreg/volume.hpp"

namespace ldreg {

struct LossWeights {
    double bending_weight = 1e-2;
    double weight_decay = 1e-6;
    double clamp_epsilon = 1e-6;
    double l2_gradient_weight = 0.0; // optional alternative regulariser
};

namespace kernels {

/// Mean two-class cross-entropy of prediction q against target p, q clamped
/// to [eps, 1 - eps].
template <typename T>
double label_cross_entropy(const T* q, const T* p, std::size_t n, double eps) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double qi = std::clamp(double(q[i]), eps, 1.0 - eps);
        const double pi = double(p[i]);
        total -= pi * std::log(qi) + (1.0 - pi) * std::log1p(-qi);
    }
    return total / static_cast<double>(n);
}

/// Accumulates scale * d(cross-entropy)/dq into grad. Clamped voxels have
/// zero derivative.
template <typename T>
void label_cross_entropy_vjp(const T* q, const T* p, std::size_t n, double eps, double scale, T* grad) {
    const double inv_n = scale / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double qi = double(q[i]);
        if (qi <= eps || qi >= 1.0 - eps) continue;
        const double pi = double(p[i]);
        grad[i] += static_cast<T>(-inv_n * (pi / qi - (1.0 - pi) / (1.0 - qi)));
    }
}

struct Strides {
    std::ptrdiff_t x, y, z;
};

inline Strides strides_of(const Shape3& s) { return {1, s[0], static_cast<std::ptrdiff_t>(s[0]) * s[1]}; }

/// Visits interior voxels (both neighbours present on every axis).
template <typename F>
void for_interior(const Shape3& s, F&& f) {
    const auto st = strides_of(s);
    for (int z = 1; z + 1 < s[2]; ++z)
        for (int y = 1; y + 1 < s[1]; ++y)
            for (int x = 1; x + 1 < s[0]; ++x) f(static_cast<std::ptrdiff_t>(x) + st.y * y + st.z * z);
}

inline std::size_t interior_count(const Shape3& s) {
    std::size_t n = 1;
    for (int a = 0; a < 3; ++a) n *= static_cast<std::size_t>(std::max(0, s[a] - 2));
    return n;
}

/// Mean over interior voxels and components of
/// u_xx^2 + u_yy^2 + u_zz^2 + 2 (u_xy^2 + u_xz^2 + u_yz^2).
template <typename T>
double bending_energy(const Shape3& s, const T* const comp[3]) {
    const auto st = strides_of(s);
    const std::ptrdiff_t d[3] = {st.x, st.y, st.z};
    double total = 0.0;
    for (int c = 0; c < 3; ++c) {
        const T* u = comp[c];
        for_interior(s, [&](std::ptrdiff_t i) {
            double e = 0.0;
            for (int a = 0; a < 3; ++a) {
                const double second = double(u[i + d[a]]) - 2.0 * double(u[i]) + double(u[i - d[a]]);
                e += second * second;
            }
            for (int a = 0; a < 3; ++a)
                for (int b = a + 1; b < 3; ++b) {
                    const double mixed = 0.25 * (double(u[i + d[a] + d[b]]) - double(u[i + d[a] - d[b]]) -
                                                 double(u[i - d[a] + d[b]]) + double(u[i - d[a] - d[b]]));
                    e += 2.0 * mixed * mixed;
                }
            total += e;
        });
    }
    return total / (3.0 * static_cast<double>(interior_count(s)));
}

template <typename T>
void bending_energy_vjp(const Shape3& s, const T* const comp[3], double scale, T* const grad[3]) {
    const auto st = strides_of(s);
    const std::ptrdiff_t d[3] = {st.x, st.y, st.z};
    const double norm = scale / (3.0 * static_cast<double>(interior_count(s)));
    for (int c = 0; c < 3; ++c) {
        const T* u = comp[c];
        T* g = grad[c];
        for_interior(s, [&](std::ptrdiff_t i) {
            for (int a = 0; a < 3; ++a) {
                const double second = double(u[i + d[a]]) - 2.0 * double(u[i]) + double(u[i - d[a]]);
                const double k = 2.0 * second * norm;
                g[i + d[a]] += static_cast<T>(k);
                g[i] += static_cast<T>(-2.0 * k);
                g[i - d[a]] += static_cast<T>(k);
            }
            for (int a = 0; a < 3; ++a)
                for (int b = a + 1; b < 3; ++b) {
                    const double mixed = 0.25 * (double(u[i + d[a] + d[b]]) - double(u[i + d[a] - d[b]]) -
                                                 double(u[i - d[a] + d[b]]) + double(u[i - d[a] - d[b]]));
                    const double k = 4.0 * mixed * 0.25 * norm;
                    g[i + d[a] + d[b]] += static_cast<T>(k);
                    g[i + d[a] - d[b]] += static_cast<T>(-k);
                    g[i - d[a] + d[b]] += static_cast<T>(-k);
                    g[i - d[a] - d[b]] += static_cast<T>(k);
                }
        });
    }
}

/// Mean over interior voxels and components of the squared central-difference
/// gradient magnitude.
template <typename T>
double l2_displacement_gradient(const Shape3& s, const T* const comp[3]) {
    const auto st = strides_of(s);
    const std::ptrdiff_t d[3] = {st.x, st.y, st.z};
    double total = 0.0;
    for (int c = 0; c < 3; ++c) {
        const T* u = comp[c];
        for_interior(s, [&](std::ptrdiff_t i) {
            for (int a = 0; a < 3; ++a) {
                const double first = 0.5 * (double(u[i + d[a]]) - double(u[i - d[a]]));
                total += first * first;
            }
        });
    }
    return total / (3.0 * static_cast<double>(interior_count(s)));
}

template <typename T>
void l2_displacement_gradient_vjp(const Shape3& s, const T* const comp[3], double scale, T* const grad[3]) {
    const auto st = strides_of(s);
    const std::ptrdiff_t d[3] = {st.x, st.y, st.z};
    const double norm = scale / (3.0 * static_cast<double>(interior_count(s)));
    for (int c = 0; c < 3; ++c) {
        const T* u = comp[c];
        T* g = grad[c];
        for_interior(s, [&](std::ptrdiff_t i) {
            for (int a = 0; a < 3; ++a) {
                const double first = 0.5 * (double(u[i + d[a]]) - double(u[i - d[a]]));
                const double k = first * norm; // 2 * first * 0.5
                g[i + d[a]] += static_cast<T>(k);
                g[i - d[a]] += static_cast<T>(-k);
            }
        });
    }
}

} // namespace kernels

template <typename T>
double label_cross_entropy(const BasicVolume<T>& prediction, const BasicVolume<T>& target, double eps = 1e-6) {
    require_same_shape(prediction, target, "label_cross_entropy");
    return kernels::label_cross_entropy(prediction.data.data(), target.data.data(), prediction.size(), eps);
}

/// d(label_cross_entropy)/d(prediction).
template <typename T>
BasicVolume<T> label_cross_entropy_grad(const BasicVolume<T>& prediction, const BasicVolume<T>& target,
                                        double eps = 1e-6) {
    require_same_shape(prediction, target, "label_cross_entropy_grad");
    BasicVolume<T> g(prediction.shape, prediction.spacing);
    kernels::label_cross_entropy_vjp(prediction.data.data(), target.data.data(), prediction.size(), eps, 1.0,
                                     g.data.data());
    return g;
}

namespace detail {
inline void require_min_extent(const Shape3& s, int min_extent, const char* what) {
    for (int a = 0; a < 3; ++a)
        require(s[a] >= min_extent, ErrorCode::GridTooSmall,
                std::string(what) + " needs every dimension >= " + std::to_string(min_extent));
}
} // namespace detail

template <typename T>
double bending_energy(const BasicDisplacementField<T>& f) {
    detail::require_min_extent(f.shape, 3, "bending_energy");
    const T* comp[3] = {f[0].data.data(), f[1].data.data(), f[2].data.data()};
    return kernels::bending_energy(f.shape, comp);
}

template <typename T>
BasicDisplacementField<T> bending_energy_grad(const BasicDisplacementField<T>& f) {
    detail::require_min_extent(f.shape, 3, "bending_energy");
    BasicDisplacementField<T> g(f.shape, f[0].spacing);
    const T* comp[3] = {f[0].data.data(), f[1].data.data(), f[2].data.data()};
    T* grad[3] = {g[0].data.data(), g[1].data.data(), g[2].data.data()};
    kernels::bending_energy_vjp(f.shape, comp, 1.0, grad);
    return g;
}

/// Needs three samples per axis for a central difference.
template <typename T>
double l2_displacement_gradient(const BasicDisplacementField<T>& f) {
    detail::require_min_extent(f.shape, 3, "l2_displacement_gradient");
    const T* comp[3] = {f[0].data.data(), f[1].data.data(), f[2].data.data()};
    return kernels::l2_displacement_gradient(f.shape, comp);
}

template <typename T>
BasicDisplacementField<T> l2_displacement_gradient_grad(const BasicDisplacementField<T>& f) {
    detail::require_min_extent(f.shape, 3, "l2_displacement_gradient");
    BasicDisplacementField<T> g(f.shape, f[0].spacing);
    const T* comp[3] = {f[0].data.data(), f[1].data.data(), f[2].data.data()};
    T* grad[3] = {g[0].data.data(), g[1].data.data(), g[2].data.data()};
    kernels::l2_displacement_gradient_vjp(f.shape, comp, 1.0, grad);
    return g;
}

/// ce + bending_weight * bending_energy(ddf) + weight_decay * ||params||^2.
template <typename T>
double total_loss(double ce, const BasicDisplacementField<T>& ddf, double params_sq_norm, const LossWeights& w) {
    double total = ce + w.weight_decay * params_sq_norm;
    if (w.bending_weight != 0.0) total += w.bending_weight * bending_energy(ddf);
    if (w.l2_gradient_weight != 0.0) total += w.l2_gradient_weight * l2_displacement_gradient(ddf);
    return total;
}

} // namespace ldreg
