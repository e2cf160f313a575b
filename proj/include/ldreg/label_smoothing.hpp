#pragma once

// One-sided label smoothing: foreground keeps probability 1, background
// decays as p = 1 - (1 - 1/d)^x with x chosen so the background mass hits a
// per-image target M.

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "ldreg/distance_transform.hpp"
#include "ldreg/error.hpp"
#include "ldreg/volume.hpp"

namespace ldreg {

struct SmoothedLabelMap {
    Volume values;          // p_i in [0, 1]
    Volume foreground_mask; // original binary mask
    double exponent = 1.0;
    double target_mass = 0.0;
    double achieved_sum = 0.0; // background sum of values
};

/// 1 on foreground, 1/d on background.
template <typename T>
BasicVolume<double> inverse_distance_map(const BasicVolume<T>& mask) {
    auto d = edt(mask);
    for (auto& value : d.data) value = value == 0.0 ? 1.0 : 1.0 / value;
    return d;
}

template <typename T>
std::size_t foreground_count(const BasicVolume<T>& mask) {
    std::size_t n = 0;
    for (T v : mask.data) n += static_cast<double>(v) >= 0.5 ? 1 : 0;
    return n;
}

/// Background-only inverse-distance mass of one mask.
template <typename T>
double background_inverse_distance_sum(const BasicVolume<T>& mask) {
    const auto d = edt(mask);
    double total = 0.0;
    for (double value : d.data)
        if (value > 0.0) total += 1.0 / value;
    return total;
}

/// Target mass M for one image: the background inverse-distance sum of the
/// label with the most foreground voxels (first one wins ties).
template <typename T>
double target_mass(std::span<const BasicVolume<T>> labels) {
    const BasicVolume<T>* largest = nullptr;
    std::size_t best = 0;
    for (const auto& label : labels) {
        const auto count = foreground_count(label);
        if (count > best) {
            best = count;
            largest = &label;
        }
    }
    if (largest == nullptr) fail(ErrorCode::EmptyForeground, "no label with foreground voxels");
    return background_inverse_distance_sum(*largest);
}

template <typename T>
double target_mass(const std::vector<BasicVolume<T>>& labels) {
    return target_mass(std::span<const BasicVolume<T>>(labels));
}

/// Background distances grouped by squared distance; g(x) only depends on
/// this histogram.
class BackgroundProfile {
public:
    template <typename T>
    explicit BackgroundProfile(const BasicVolume<T>& mask) {
        const auto d2 = squared_edt(mask);
        std::map<std::int64_t, std::size_t> histogram;
        for (double value : d2.data)
            if (value > 0.0) ++histogram[static_cast<std::int64_t>(value)];
        for (const auto& [sq, count] : histogram) {
            const double d = std::sqrt(static_cast<double>(sq));
            log_base_.push_back(std::log1p(-1.0 / d)); // -inf for d == 1
            counts_.push_back(static_cast<double>(count));
            background_ += count;
            if (sq > 1) any_far_ = true;
        }
    }

    /// g(x) = sum over background of 1 - (1 - 1/d)^x.
    double mass(double x) const {
        double total = 0.0;
        for (std::size_t k = 0; k < counts_.size(); ++k) total += counts_[k] * -std::expm1(x * log_base_[k]);
        return total;
    }

    std::size_t background_count() const { return background_; }
    bool has_voxel_beyond_unit_distance() const { return any_far_; }

private:
    std::vector<double> log_base_;
    std::vector<double> counts_;
    std::size_t background_ = 0;
    bool any_far_ = false;
};

struct ExponentSolution {
    double exponent = 1.0;
    double achieved_sum = 0.0;
    bool reachable = true;
    int iterations = 0;
};

struct ExponentSolverOptions {
    double log2_lower = -20.0;
    double log2_upper = 20.0;
    double relative_tolerance = 1e-6;
    int max_iterations = 80;
};

/// Bisection (in log2 x) for the exponent whose background mass equals M.
/// An out-of-range M returns the clamped bracket end with reachable = false.
template <typename T>
ExponentSolution solve_exponent(const BasicVolume<T>& mask, double target, const ExponentSolverOptions& opt = {}) {
    require(target > 0.0 && std::isfinite(target), ErrorCode::InvalidArgument, "target mass must be positive");
    const BackgroundProfile profile(mask);
    const double tol = opt.relative_tolerance * target;

    ExponentSolution sol;
    if (!profile.has_voxel_beyond_unit_distance()) {
        // g is constant in x
        sol.achieved_sum = profile.mass(1.0);
        sol.reachable = std::abs(sol.achieved_sum - target) <= tol;
        return sol;
    }

    double lo = opt.log2_lower, hi = opt.log2_upper;
    const double g_lo = profile.mass(std::exp2(lo));
    const double g_hi = profile.mass(std::exp2(hi));
    if (target > g_hi + tol) return {std::exp2(hi), g_hi, false, 0};
    if (target < g_lo - tol) return {std::exp2(lo), g_lo, false, 0};

    double mid = 0.5 * (lo + hi);
    double g_mid = 0.0;
    for (int it = 1; it <= opt.max_iterations; ++it) {
        mid = 0.5 * (lo + hi);
        g_mid = profile.mass(std::exp2(mid));
        sol.iterations = it;
        if (std::abs(g_mid - target) <= tol) break;
        if (g_mid < target)
            lo = mid;
        else
            hi = mid;
    }
    sol.exponent = std::exp2(mid);
    sol.achieved_sum = g_mid;
    sol.reachable = std::abs(g_mid - target) <= std::max(tol, 1e-3 * target);
    return sol;
}

/// Smoothed probability map for one binary mask, normalised to mass M.
/// Throws UnreachableTargetError when no exponent in range reaches M.
template <typename T>
SmoothedLabelMap smooth_label(const BasicVolume<T>& mask, double target, const ExponentSolverOptions& opt = {}) {
    const auto sol = solve_exponent(mask, target, opt);
    if (!sol.reachable) throw UnreachableTargetError(target, sol.achieved_sum, sol.exponent);

    const auto d = edt(mask);
    SmoothedLabelMap out;
    out.foreground_mask = volume_cast<float>(mask);
    out.values = Volume(mask.shape, mask.spacing);
    out.exponent = sol.exponent;
    out.target_mass = target;
    double sum = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d.data[i] == 0.0) {
            out.values.data[i] = 1.0f;
            out.foreground_mask.data[i] = 1.0f;
        } else {
            const double p = -std::expm1(sol.exponent * std::log1p(-1.0 / d.data[i]));
            out.values.data[i] = static_cast<float>(p);
            out.foreground_mask.data[i] = 0.0f;
            sum += p;
        }
    }
    out.achieved_sum = sum;
    return out;
}

} // namespace ldreg
