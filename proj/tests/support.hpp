#pragma once

// Shared helpers for the test suite: random fixtures, brute-force oracles
// and a finite-difference gradient checker for tape expressions.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "ldreg/ldreg.hpp"

namespace ldreg::testing {

inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("ldreg_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

template <typename T = float>
BasicVolume<T> random_volume(const Shape3& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    BasicVolume<T> v(s);
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& x : v.data) x = static_cast<T>(d(rng));
    return v;
}

template <typename T = float>
BasicVolume<T> random_mask(const Shape3& s, std::mt19937_64& rng, double p) {
    BasicVolume<T> v(s);
    std::bernoulli_distribution b(p);
    for (auto& x : v.data) x = b(rng) ? T(1) : T(0);
    if (foreground_count(v) == 0) v.data[rng() % v.size()] = T(1);
    return v;
}

template <typename T>
Tensor<T> random_tensor(const Dims5& d, std::mt19937_64& rng, double scale = 1.0) {
    Tensor<T> t(d);
    std::normal_distribution<double> g(0.0, scale);
    for (auto& x : t.data) x = static_cast<T>(g(rng));
    return t;
}

/// Nearest-foreground distance by exhaustive search.
template <typename T>
BasicVolume<double> brute_force_edt(const BasicVolume<T>& mask) {
    BasicVolume<double> out(mask.shape);
    std::vector<std::array<int, 3>> fg;
    for (int z = 0; z < mask.nz(); ++z)
        for (int y = 0; y < mask.ny(); ++y)
            for (int x = 0; x < mask.nx(); ++x)
                if (double(mask(x, y, z)) >= 0.5) fg.push_back({x, y, z});
    for (int z = 0; z < mask.nz(); ++z)
        for (int y = 0; y < mask.ny(); ++y)
            for (int x = 0; x < mask.nx(); ++x) {
                double best = std::numeric_limits<double>::infinity();
                for (const auto& p : fg) {
                    const double d2 = double(p[0] - x) * (p[0] - x) + double(p[1] - y) * (p[1] - y) +
                                      double(p[2] - z) * (p[2] - z);
                    best = std::min(best, d2);
                }
                out(x, y, z) = std::sqrt(best);
            }
    return out;
}

struct GradientCheck {
    double max_relative_error = 0.0;
    int checked = 0;
};

/// Compares the tape gradient of L = <w, f(inputs)> (w random, fixed) with
/// central differences at up to `samples` coordinates per input. Relative
/// error is |analytic - numeric| / max(|analytic|, |numeric|, floor), where
/// floor is 1e-3 of the largest analytic entry of that input.
inline GradientCheck check_gradient(const std::function<Var(Tape<double>&, const std::vector<Var>&)>& f,
                                    std::vector<Tensor<double>> inputs, std::uint64_t seed = 1, int samples = 40,
                                    double h = 1e-6) {
    std::mt19937_64 rng(seed);
    Tensor<double> weights;
    auto evaluate = [&](const std::vector<Tensor<double>>& xs, std::vector<Tensor<double>>* grads) {
        Tape<double> tape;
        std::vector<Var> vars;
        for (const auto& x : xs) vars.push_back(tape.input(x, true));
        const Var out = f(tape, vars);
        const auto& y = tape.value(out);
        if (weights.data.empty()) {
            weights = Tensor<double>(y.dims);
            std::normal_distribution<double> g;
            for (auto& w : weights.data) w = g(rng);
        }
        double loss = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) loss += weights.data[i] * y.data[i];
        if (grads != nullptr) {
            tape.backward(out, &weights);
            for (const auto& v : vars) grads->push_back(tape.has_grad(v) ? tape.grad(v) : Tensor<double>(tape.value(v).dims));
        }
        return loss;
    };
    std::vector<Tensor<double>> analytic;
    evaluate(inputs, &analytic);

    GradientCheck result;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        double scale = 0.0;
        for (double g : analytic[k].data) scale = std::max(scale, std::abs(g));
        const double floor = std::max(1e-3 * scale, 1e-10);
        const std::size_t n = inputs[k].size();
        std::vector<std::size_t> coords(n);
        for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(std::min<std::size_t>(n, static_cast<std::size_t>(samples)));
        for (std::size_t i : coords) {
            auto plus = inputs, minus = inputs;
            plus[k].data[i] += h;
            minus[k].data[i] -= h;
            const double numeric = (evaluate(plus, nullptr) - evaluate(minus, nullptr)) / (2.0 * h);
            const double a = analytic[k].data[i];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            result.max_relative_error = std::max(result.max_relative_error, err);
            ++result.checked;
        }
    }
    return result;
}

template <typename T>
double pearson(const std::vector<T>& a, const std::vector<T>& b) {
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= double(a.size());
    mb /= double(b.size());
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

} // namespace ldreg::testing
