#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "ldreg/error.hpp"
#include "ldreg/volume.hpp"

namespace ldreg {

namespace detail {

/// One pass of the lower-envelope squared distance transform over a line of
/// `n` samples spaced `stride` apart. f holds squared distances (or +inf).
inline void edt_line(double* f, std::size_t n, std::size_t stride, std::vector<double>& line,
                     std::vector<double>& out, std::vector<int>& v, std::vector<double>& z) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    line.resize(n);
    out.resize(n);
    v.resize(n);
    z.resize(n + 1);
    for (std::size_t i = 0; i < n; ++i) line[i] = f[i * stride];

    // parabolas rooted at +inf samples never contribute; skip them
    int k = -1;
    for (int q = 0; q < static_cast<int>(n); ++q) {
        const double fq = line[static_cast<std::size_t>(q)];
        if (fq == inf) continue;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -inf;
            z[1] = inf;
            continue;
        }
        double s = 0.0;
        // z[0] = -inf, so k never drops below zero
        while (true) {
            const int p = v[static_cast<std::size_t>(k)];
            s = ((fq + double(q) * q) - (line[static_cast<std::size_t>(p)] + double(p) * p)) / (2.0 * (q - p));
            if (s > z[static_cast<std::size_t>(k)]) break;
            --k;
        }
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        z[static_cast<std::size_t>(k)] = s;
        z[static_cast<std::size_t>(k) + 1] = inf;
    }

    if (k < 0) return; // whole line is +inf; leave untouched

    int j = 0;
    for (int q = 0; q < static_cast<int>(n); ++q) {
        while (z[static_cast<std::size_t>(j) + 1] < q) ++j;
        const int p = v[static_cast<std::size_t>(j)];
        const double d = q - p;
        out[static_cast<std::size_t>(q)] = d * d + line[static_cast<std::size_t>(p)];
    }
    for (std::size_t i = 0; i < n; ++i) f[i * stride] = out[i];
}

} // namespace detail

/// Exact squared Euclidean distance (voxel units) to the nearest foreground
/// voxel, by three separable lower-envelope passes. Foreground is any value
/// >= 0.5.
template <typename T>
BasicVolume<double> squared_edt(const BasicVolume<T>& mask) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    BasicVolume<double> f(mask.shape, mask.spacing);
    bool any = false;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const bool fg = static_cast<double>(mask.data[i]) >= 0.5;
        f.data[i] = fg ? 0.0 : inf;
        any = any || fg;
    }
    if (!any) fail(ErrorCode::EmptyForeground, "mask has no foreground voxel");

    const auto [nx, ny, nz] = mask.shape;
    const std::size_t sx = 1, sy = static_cast<std::size_t>(nx), sz = static_cast<std::size_t>(nx) * ny;
    std::vector<double> line, out, z;
    std::vector<int> v;
    for (int k = 0; k < nz; ++k)
        for (int j = 0; j < ny; ++j)
            detail::edt_line(&f.data[f.index(0, j, k)], static_cast<std::size_t>(nx), sx, line, out, v, z);
    for (int k = 0; k < nz; ++k)
        for (int i = 0; i < nx; ++i)
            detail::edt_line(&f.data[f.index(i, 0, k)], static_cast<std::size_t>(ny), sy, line, out, v, z);
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i)
            detail::edt_line(&f.data[f.index(i, j, 0)], static_cast<std::size_t>(nz), sz, line, out, v, z);
    return f;
}

/// Euclidean distance from each voxel centre to the nearest foreground voxel
/// centre, in voxel units (spacing ignored). Foreground voxels hold 0.
template <typename T>
BasicVolume<double> edt(const BasicVolume<T>& mask) {
    auto d = squared_edt(mask);
    for (auto& value : d.data) value = std::sqrt(value);
    return d;
}

} // namespace ldreg
