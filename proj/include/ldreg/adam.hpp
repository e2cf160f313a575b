#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "ldreg/error.hpp"
#include "ldreg/network.hpp"
#include "ldreg/tensor.hpp"

namespace ldreg {

struct AdamSettings {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Moments of one parameter tensor. Each slot keeps its own step count so a
/// block that starts training late gets a fresh bias correction.
template <typename T>
struct AdamSlot {
    Tensor<T> m, v;
    std::int64_t step = 0;
};

template <typename T>
struct AdamState {
    AdamSettings settings;
    std::map<std::string, AdamSlot<T>> slots;
};

template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamSlot<T>& slot, double lr,
               const AdamSettings& s = {}) {
    require(grad.dims == param.dims, ErrorCode::ShapeMismatch,
            "adam: gradient " + grad.dims.str() + " vs parameter " + param.dims.str());
    if (slot.m.dims != param.dims || slot.m.data.size() != param.data.size()) {
        require(slot.step == 0, ErrorCode::ShapeMismatch, "adam: moment shape differs from parameter");
        slot.m = Tensor<T>(param.dims);
        slot.v = Tensor<T>(param.dims);
    }
    ++slot.step;
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(slot.step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(slot.step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = double(grad.data[i]);
        const double m = s.beta1 * double(slot.m.data[i]) + (1.0 - s.beta1) * g;
        const double v = s.beta2 * double(slot.v.data[i]) + (1.0 - s.beta2) * g * g;
        slot.m.data[i] = static_cast<T>(m);
        slot.v.data[i] = static_cast<T>(v);
        const double update = lr * (m / c1) / (std::sqrt(v / c2) + s.epsilon);
        param.data[i] = static_cast<T>(double(param.data[i]) - update);
    }
}

/// One update of every parameter that has an entry in `grads`.
template <typename T>
void adam_step(NetworkParameters<T>& params, const std::map<std::string, Tensor<T>>& grads, AdamState<T>& state,
               double lr) {
    for (const auto& [name, g] : grads) adam_step(params.at(name), g, state.slots[name], lr, state.settings);
}

} // namespace ldreg
