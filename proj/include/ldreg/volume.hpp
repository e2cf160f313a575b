#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ldreg/error.hpp"

namespace ldreg {

/// Grid extent (Nx, Ny, Nz). Data is always stored x-fastest.
using Shape3 = std::array<int, 3>;
/// Millimetres per voxel along x, y, z.
using Spacing3 = std::array<double, 3>;

inline std::size_t voxel_count(const Shape3& shape) {
    return static_cast<std::size_t>(shape[0]) * static_cast<std::size_t>(shape[1]) *
           static_cast<std::size_t>(shape[2]);
}

inline std::string shape_string(const Shape3& s) {
    return std::to_string(s[0]) + "x" + std::to_string(s[1]) + "x" + std::to_string(s[2]);
}

/// 3D scalar grid used for images, binary masks, probability maps and
/// displacement components.
template <typename T>
struct BasicVolume {
    using value_type = T;

    Shape3 shape{1, 1, 1};
    Spacing3 spacing{1.0, 1.0, 1.0};
    std::vector<T> data;

    BasicVolume() : data(1, T(0)) {}

    explicit BasicVolume(const Shape3& s, const Spacing3& sp = {1.0, 1.0, 1.0}, T fill = T(0))
        : shape(s), spacing(sp) {
        for (int i = 0; i < 3; ++i) {
            require(s[i] > 0, ErrorCode::InvalidArgument, "volume shape must be positive");
            require(sp[i] > 0.0, ErrorCode::InvalidArgument, "volume spacing must be positive");
        }
        data.assign(voxel_count(s), fill);
    }

    BasicVolume(const Shape3& s, const Spacing3& sp, std::vector<T> values)
        : shape(s), spacing(sp), data(std::move(values)) {
        require(data.size() == voxel_count(s), ErrorCode::ShapeMismatch,
                "data length does not match shape " + shape_string(s));
    }

    std::size_t size() const noexcept { return data.size(); }
    int nx() const noexcept { return shape[0]; }
    int ny() const noexcept { return shape[1]; }
    int nz() const noexcept { return shape[2]; }

    std::size_t index(int x, int y, int z) const noexcept {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(shape[0]) *
                   (static_cast<std::size_t>(y) + static_cast<std::size_t>(shape[1]) * static_cast<std::size_t>(z));
    }

    T& operator()(int x, int y, int z) noexcept { return data[index(x, y, z)]; }
    const T& operator()(int x, int y, int z) const noexcept { return data[index(x, y, z)]; }

    bool contains(int x, int y, int z) const noexcept {
        return x >= 0 && y >= 0 && z >= 0 && x < shape[0] && y < shape[1] && z < shape[2];
    }

    std::span<T> values() noexcept { return data; }
    std::span<const T> values() const noexcept { return data; }
};

using Volume = BasicVolume<float>;

template <typename To, typename From>
BasicVolume<To> volume_cast(const BasicVolume<From>& v) {
    BasicVolume<To> out;
    out.shape = v.shape;
    out.spacing = v.spacing;
    out.data.resize(v.data.size());
    std::transform(v.data.begin(), v.data.end(), out.data.begin(),
                   [](From value) { return static_cast<To>(value); });
    return out;
}

template <typename T>
bool all_finite(const BasicVolume<T>& v) {
    return std::all_of(v.data.begin(), v.data.end(), [](T value) { return std::isfinite(value); });
}

template <typename T>
void require_same_shape(const BasicVolume<T>& a, const BasicVolume<T>& b, const char* what) {
    require(a.shape == b.shape, ErrorCode::ShapeMismatch,
            std::string(what) + ": " + shape_string(a.shape) + " vs " + shape_string(b.shape));
}

/// Sum in index order; every reduction in the library goes through this so
/// results are reproducible.
template <typename T>
double ordered_sum(std::span<const T> values) {
    double total = 0.0;
    for (T v : values) total += static_cast<double>(v);
    return total;
}

struct IntensityStats {
    double mean = 0.0;
    double stddev = 0.0; // population
};

template <typename T>
IntensityStats intensity_stats(const BasicVolume<T>& v) {
    const double n = static_cast<double>(v.size());
    const double mean = ordered_sum(v.values()) / n;
    double ss = 0.0;
    for (T value : v.data) {
        const double d = static_cast<double>(value) - mean;
        ss += d * d;
    }
    return {mean, std::sqrt(ss / n)};
}

/// Zero-mean, unit population variance.
template <typename T>
BasicVolume<T> normalize_intensity(const BasicVolume<T>& v) {
    const auto stats = intensity_stats(v);
    if (!(stats.stddev >= 1e-8))
        fail(ErrorCode::DegenerateVariance, "standard deviation " + std::to_string(stats.stddev) + " below 1e-8");
    BasicVolume<T> out = v;
    const double inv = 1.0 / stats.stddev;
    for (auto& value : out.data) value = static_cast<T>((static_cast<double>(value) - stats.mean) * inv);
    return out;
}

/// Trilinear resize with corner-aligned mapping src = dst * (S - 1) / (D - 1).
/// Physical extent is preserved, so spacing scales by the same ratio.
template <typename T>
BasicVolume<T> resize_linear(const BasicVolume<T>& v, const Shape3& target) {
    for (int a = 0; a < 3; ++a)
        require(target[a] >= 1, ErrorCode::InvalidArgument, "target shape must be positive");
    if (target == v.shape) return v;

    Spacing3 spacing{};
    std::array<double, 3> ratio{};
    for (int a = 0; a < 3; ++a) {
        ratio[a] = target[a] > 1 ? static_cast<double>(v.shape[a] - 1) / static_cast<double>(target[a] - 1) : 0.0;
        spacing[a] = v.spacing[a] * static_cast<double>(v.shape[a]) / static_cast<double>(target[a]);
    }
    BasicVolume<T> out(target, spacing);

    struct Tap {
        int lo, hi;
        double w;
    };
    auto taps = [&](int axis) {
        std::vector<Tap> result(static_cast<std::size_t>(target[axis]));
        for (int d = 0; d < target[axis]; ++d) {
            const double src = d * ratio[axis];
            int lo = static_cast<int>(std::floor(src));
            lo = std::clamp(lo, 0, v.shape[axis] - 1);
            const int hi = std::min(lo + 1, v.shape[axis] - 1);
            result[static_cast<std::size_t>(d)] = {lo, hi, src - lo};
        }
        return result;
    };
    const auto tx = taps(0), ty = taps(1), tz = taps(2);

    for (int z = 0; z < target[2]; ++z) {
        const auto& cz = tz[static_cast<std::size_t>(z)];
        for (int y = 0; y < target[1]; ++y) {
            const auto& cy = ty[static_cast<std::size_t>(y)];
            for (int x = 0; x < target[0]; ++x) {
                const auto& cx = tx[static_cast<std::size_t>(x)];
                double acc = 0.0;
                double lo = std::numeric_limits<double>::infinity();
                double hi = -lo;
                for (int k = 0; k < 8; ++k) {
                    const double wx = (k & 1) ? cx.w : 1.0 - cx.w;
                    const double wy = (k & 2) ? cy.w : 1.0 - cy.w;
                    const double wz = (k & 4) ? cz.w : 1.0 - cz.w;
                    const double w = wx * wy * wz;
                    if (w == 0.0) continue;
                    const double sample = static_cast<double>(
                        v((k & 1) ? cx.hi : cx.lo, (k & 2) ? cy.hi : cy.lo, (k & 4) ? cz.hi : cz.lo));
                    acc += w * sample;
                    lo = std::min(lo, sample);
                    hi = std::max(hi, sample);
                }
                // rounding must not leave the hull of the corner samples
                out(x, y, z) = static_cast<T>(std::clamp(acc, lo, hi));
            }
        }
    }
    return out;
}

} // namespace ldreg
