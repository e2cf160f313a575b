#pragma once

// Dense displacement fields live on the fixed grid and point into the moving
// volume (pull-back warping). Affine parameters act on centred voxel
// coordinates c = i - (N - 1) / 2 of the fixed grid.

#include <array>
#include <cmath>
#include <span>

#include "ldreg/error.hpp"
#include "ldreg/volume.hpp"

namespace ldreg {

template <typename T>
struct BasicDisplacementField {
    Shape3 shape{1, 1, 1};
    std::array<BasicVolume<T>, 3> components; // u_x, u_y, u_z in fixed voxel units

    BasicDisplacementField() = default;
    explicit BasicDisplacementField(const Shape3& s, const Spacing3& spacing = {1.0, 1.0, 1.0})
        : shape(s), components{BasicVolume<T>(s, spacing), BasicVolume<T>(s, spacing), BasicVolume<T>(s, spacing)} {}

    BasicVolume<T>& operator[](int axis) { return components[static_cast<std::size_t>(axis)]; }
    const BasicVolume<T>& operator[](int axis) const { return components[static_cast<std::size_t>(axis)]; }

    std::size_t size() const { return voxel_count(shape); }

    double max_magnitude() const {
        double best = 0.0;
        for (std::size_t i = 0; i < size(); ++i) {
            double sq = 0.0;
            for (int a = 0; a < 3; ++a) sq += double((*this)[a].data[i]) * double((*this)[a].data[i]);
            best = std::max(best, std::sqrt(sq));
        }
        return best;
    }
};

using DisplacementField = BasicDisplacementField<float>;

template <typename To, typename From>
BasicDisplacementField<To> field_cast(const BasicDisplacementField<From>& f) {
    BasicDisplacementField<To> out;
    out.shape = f.shape;
    for (int a = 0; a < 3; ++a) out[a] = volume_cast<To>(f[a]);
    return out;
}

/// Row-major 3x4 matrix [A | t] on centred fixed-grid voxel coordinates.
struct AffineParams {
    std::array<double, 12> values{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};

    static AffineParams identity() { return {}; }
    static AffineParams translation(double tx, double ty, double tz) {
        AffineParams p;
        p.values[3] = tx;
        p.values[7] = ty;
        p.values[11] = tz;
        return p;
    }
    double a(int row, int col) const { return values[static_cast<std::size_t>(4 * row + col)]; }
    double t(int row) const { return values[static_cast<std::size_t>(4 * row + 3)]; }
    bool finite() const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline double centered(int i, int n) { return static_cast<double>(i) - 0.5 * static_cast<double>(n - 1); }

enum class Padding { Zero, Border };

namespace kernels {

/// Displacement of the affine map at every voxel: (A c + t) - c.
template <typename T>
void affine_grid(const double* theta, const Shape3& shape, T* ux, T* uy, T* uz) {
    std::size_t i = 0;
    for (int z = 0; z < shape[2]; ++z) {
        const double cz = centered(z, shape[2]);
        for (int y = 0; y < shape[1]; ++y) {
            const double cy = centered(y, shape[1]);
            for (int x = 0; x < shape[0]; ++x, ++i) {
                const double cx = centered(x, shape[0]);
                ux[i] = static_cast<T>(theta[0] * cx + theta[1] * cy + theta[2] * cz + theta[3] - cx);
                uy[i] = static_cast<T>(theta[4] * cx + theta[5] * cy + theta[6] * cz + theta[7] - cy);
                uz[i] = static_cast<T>(theta[8] * cx + theta[9] * cy + theta[10] * cz + theta[11] - cz);
            }
        }
    }
}

/// Accumulates d<g, affine_grid(theta)>/d theta into grad_theta.
template <typename T>
void affine_grid_vjp(const Shape3& shape, const T* gx, const T* gy, const T* gz, double* grad_theta) {
    std::array<double, 12> acc{};
    std::size_t i = 0;
    for (int z = 0; z < shape[2]; ++z) {
        const double cz = centered(z, shape[2]);
        for (int y = 0; y < shape[1]; ++y) {
            const double cy = centered(y, shape[1]);
            for (int x = 0; x < shape[0]; ++x, ++i) {
                const double cx = centered(x, shape[0]);
                const double g[3] = {double(gx[i]), double(gy[i]), double(gz[i])};
                for (int r = 0; r < 3; ++r) {
                    acc[static_cast<std::size_t>(4 * r + 0)] += g[r] * cx;
                    acc[static_cast<std::size_t>(4 * r + 1)] += g[r] * cy;
                    acc[static_cast<std::size_t>(4 * r + 2)] += g[r] * cz;
                    acc[static_cast<std::size_t>(4 * r + 3)] += g[r];
                }
            }
        }
    }
    for (std::size_t k = 0; k < 12; ++k) grad_theta[k] += acc[k];
}

/// Composed displacement A (c + u) + t - c.
template <typename T>
void compose(const double* theta, const Shape3& shape, const T* lx, const T* ly, const T* lz, T* ux, T* uy, T* uz) {
    std::size_t i = 0;
    for (int z = 0; z < shape[2]; ++z) {
        const double cz = centered(z, shape[2]);
        for (int y = 0; y < shape[1]; ++y) {
            const double cy = centered(y, shape[1]);
            for (int x = 0; x < shape[0]; ++x, ++i) {
                const double cx = centered(x, shape[0]);
                const double px = cx + double(lx[i]), py = cy + double(ly[i]), pz = cz + double(lz[i]);
                ux[i] = static_cast<T>(theta[0] * px + theta[1] * py + theta[2] * pz + theta[3] - cx);
                uy[i] = static_cast<T>(theta[4] * px + theta[5] * py + theta[6] * pz + theta[7] - cy);
                uz[i] = static_cast<T>(theta[8] * px + theta[9] * py + theta[10] * pz + theta[11] - cz);
            }
        }
    }
}

/// Reverse pass of compose. Either output pointer group may be null.
template <typename T>
void compose_vjp(const double* theta, const Shape3& shape, const T* lx, const T* ly, const T* lz, const T* gx,
                 const T* gy, const T* gz, double* grad_theta, T* glx, T* gly, T* glz) {
    std::array<double, 12> acc{};
    std::size_t i = 0;
    for (int z = 0; z < shape[2]; ++z) {
        const double cz = centered(z, shape[2]);
        for (int y = 0; y < shape[1]; ++y) {
            const double cy = centered(y, shape[1]);
            for (int x = 0; x < shape[0]; ++x, ++i) {
                const double p[3] = {centered(x, shape[0]) + double(lx[i]), cy + double(ly[i]), cz + double(lz[i])};
                const double g[3] = {double(gx[i]), double(gy[i]), double(gz[i])};
                for (int r = 0; r < 3; ++r) {
                    for (int c = 0; c < 3; ++c) acc[static_cast<std::size_t>(4 * r + c)] += g[r] * p[c];
                    acc[static_cast<std::size_t>(4 * r + 3)] += g[r];
                }
                if (glx != nullptr) {
                    glx[i] += static_cast<T>(theta[0] * g[0] + theta[4] * g[1] + theta[8] * g[2]);
                    gly[i] += static_cast<T>(theta[1] * g[0] + theta[5] * g[1] + theta[9] * g[2]);
                    glz[i] += static_cast<T>(theta[2] * g[0] + theta[6] * g[1] + theta[10] * g[2]);
                }
            }
        }
    }
    if (grad_theta != nullptr)
        for (std::size_t k = 0; k < 12; ++k) grad_theta[k] += acc[k];
}

/// Per-axis factor mapping fixed-grid voxel coordinates onto the source
/// grid (corner-aligned, same convention as resize_linear).
inline std::array<double, 3> sample_scale(const Shape3& src, const Shape3& out) {
    std::array<double, 3> s{};
    for (int a = 0; a < 3; ++a)
        s[static_cast<std::size_t>(a)] =
            out[a] > 1 ? static_cast<double>(src[a] - 1) / static_cast<double>(out[a] - 1) : 0.0;
    return s;
}

struct Corner {
    int i0;
    double f;          // fractional offset in [0, 1)
    bool live = true;  // false when a border clamp froze this axis
};

inline Corner split(double p) {
    const double fl = std::floor(p);
    return {static_cast<int>(fl), p - fl};
}

/// Border mode clamps the sample position into the source grid, so samples
/// beyond the edge repeat the edge value.
inline Corner split(double p, int extent, Padding pad) {
    if (pad == Padding::Border) {
        if (p <= 0.0) return {0, 0.0, false};
        if (p >= extent - 1) return {extent - 1, 0.0, false};
    }
    return split(p);
}

/// Trilinear pull-back sample of src at (x + u(x)) * scale; zero outside
/// unless pad is Border.
template <typename T>
void warp(const T* src, const Shape3& src_shape, const T* ux, const T* uy, const T* uz, const Shape3& out_shape,
          T* out, Padding pad = Padding::Zero) {
    const auto scale = sample_scale(src_shape, out_shape);
    const auto [sx, sy, sz] = src_shape;
    std::size_t i = 0;
    for (int z = 0; z < out_shape[2]; ++z)
        for (int y = 0; y < out_shape[1]; ++y)
            for (int x = 0; x < out_shape[0]; ++x, ++i) {
                const Corner cx = split((x + double(ux[i])) * scale[0], sx, pad);
                const Corner cy = split((y + double(uy[i])) * scale[1], sy, pad);
                const Corner cz = split((z + double(uz[i])) * scale[2], sz, pad);
                double acc = 0.0;
                for (int k = 0; k < 8; ++k) {
                    const int xi = cx.i0 + (k & 1), yi = cy.i0 + ((k >> 1) & 1), zi = cz.i0 + ((k >> 2) & 1);
                    if (xi < 0 || yi < 0 || zi < 0 || xi >= sx || yi >= sy || zi >= sz) continue;
                    const double w = ((k & 1) ? cx.f : 1.0 - cx.f) * (((k >> 1) & 1) ? cy.f : 1.0 - cy.f) *
                                     (((k >> 2) & 1) ? cz.f : 1.0 - cz.f);
                    acc += w * double(src[static_cast<std::size_t>(xi) +
                                          static_cast<std::size_t>(sx) *
                                              (static_cast<std::size_t>(yi) + static_cast<std::size_t>(sy) * zi)]);
                }
                out[i] = static_cast<T>(acc);
            }
}

/// Reverse pass of warp: scatters upstream into grad_src (if non-null) and
/// accumulates the derivative w.r.t. the displacement into g{x,y,z} (if
/// non-null). The scatter order is the fixed voxel order.
template <typename T>
void warp_vjp(const T* src, const Shape3& src_shape, const T* ux, const T* uy, const T* uz, const Shape3& out_shape,
              const T* upstream, T* grad_src, T* gx, T* gy, T* gz, Padding pad = Padding::Zero) {
    const auto scale = sample_scale(src_shape, out_shape);
    const auto [sx, sy, sz] = src_shape;
    std::size_t i = 0;
    for (int z = 0; z < out_shape[2]; ++z)
        for (int y = 0; y < out_shape[1]; ++y)
            for (int x = 0; x < out_shape[0]; ++x, ++i) {
                const double g = double(upstream[i]);
                if (g == 0.0) continue;
                const Corner cx = split((x + double(ux[i])) * scale[0], sx, pad);
                const Corner cy = split((y + double(uy[i])) * scale[1], sy, pad);
                const Corner cz = split((z + double(uz[i])) * scale[2], sz, pad);
                double dx = 0.0, dy = 0.0, dz = 0.0;
                for (int k = 0; k < 8; ++k) {
                    const int bx = k & 1, by = (k >> 1) & 1, bz = (k >> 2) & 1;
                    const int xi = cx.i0 + bx, yi = cy.i0 + by, zi = cz.i0 + bz;
                    if (xi < 0 || yi < 0 || zi < 0 || xi >= sx || yi >= sy || zi >= sz) continue;
                    const double wx = bx ? cx.f : 1.0 - cx.f;
                    const double wy = by ? cy.f : 1.0 - cy.f;
                    const double wz = bz ? cz.f : 1.0 - cz.f;
                    const std::size_t j = static_cast<std::size_t>(xi) +
                                          static_cast<std::size_t>(sx) *
                                              (static_cast<std::size_t>(yi) + static_cast<std::size_t>(sy) * zi);
                    if (grad_src != nullptr) grad_src[j] += static_cast<T>(g * wx * wy * wz);
                    const double v = double(src[j]);
                    dx += v * (bx ? 1.0 : -1.0) * wy * wz;
                    dy += v * wx * (by ? 1.0 : -1.0) * wz;
                    dz += v * wx * wy * (bz ? 1.0 : -1.0);
                }
                if (gx != nullptr) {
                    if (cx.live) gx[i] += static_cast<T>(g * dx * scale[0]);
                    if (cy.live) gy[i] += static_cast<T>(g * dy * scale[1]);
                    if (cz.live) gz[i] += static_cast<T>(g * dz * scale[2]);
                }
            }
}

} // namespace kernels

template <typename T = float>
BasicDisplacementField<T> affine_grid(const AffineParams& params, const Shape3& shape,
                                      const Spacing3& spacing = {1.0, 1.0, 1.0}) {
    require(params.finite(), ErrorCode::InvalidArgument, "affine parameters must be finite");
    BasicDisplacementField<T> f(shape, spacing);
    kernels::affine_grid(params.values.data(), shape, f[0].data.data(), f[1].data.data(), f[2].data.data());
    return f;
}

/// Total map T(c) = A (c + u(c)) + t; returns T(c) - c.
template <typename T>
BasicDisplacementField<T> compose(const AffineParams& params, const BasicDisplacementField<T>& local) {
    BasicDisplacementField<T> f(local.shape, local[0].spacing);
    kernels::compose(params.values.data(), local.shape, local[0].data.data(), local[1].data.data(),
                     local[2].data.data(), f[0].data.data(), f[1].data.data(), f[2].data.data());
    return f;
}

template <typename T>
BasicVolume<T> warp_trilinear(const BasicVolume<T>& v, const BasicDisplacementField<T>& ddf,
                              Padding pad = Padding::Zero) {
    BasicVolume<T> out(ddf.shape, ddf[0].spacing);
    kernels::warp(v.data.data(), v.shape, ddf[0].data.data(), ddf[1].data.data(), ddf[2].data.data(), ddf.shape,
                  out.data.data(), pad);
    return out;
}

template <typename T>
struct WarpGradients {
    BasicVolume<T> grad_volume;
    BasicDisplacementField<T> grad_ddf;
};

template <typename T>
WarpGradients<T> warp_trilinear_vjp(const BasicVolume<T>& v, const BasicDisplacementField<T>& ddf,
                                    const BasicVolume<T>& upstream, Padding pad = Padding::Zero) {
    require(upstream.shape == ddf.shape, ErrorCode::ShapeMismatch, "upstream must live on the field grid");
    WarpGradients<T> g{BasicVolume<T>(v.shape, v.spacing), BasicDisplacementField<T>(ddf.shape, ddf[0].spacing)};
    kernels::warp_vjp(v.data.data(), v.shape, ddf[0].data.data(), ddf[1].data.data(), ddf[2].data.data(), ddf.shape,
                      upstream.data.data(), g.grad_volume.data.data(), g.grad_ddf[0].data.data(),
                      g.grad_ddf[1].data.data(), g.grad_ddf[2].data.data(), pad);
    return g;
}

template <typename T>
BasicDisplacementField<T> subtract(const BasicDisplacementField<T>& a, const BasicDisplacementField<T>& b) {
    require(a.shape == b.shape, ErrorCode::ShapeMismatch, "field shapes differ");
    auto out = a;
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < out.size(); ++i) out[c].data[i] -= b[c].data[i];
    return out;
}

} // namespace ldreg
