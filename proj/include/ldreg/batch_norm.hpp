#pragma once

#include <cmath>
#include <vector>

#include "ldreg/error.hpp"
#include "ldreg/tape.hpp"

namespace ldreg {

enum class Mode { Train, Infer };

struct BatchNormSettings {
    double epsilon = 1e-5;
    double momentum = 0.9; // running = momentum * running + (1 - momentum) * batch
};

namespace ops {

/// Per-channel batch normalisation. In Train mode the running statistics in
/// `running_mean` / `running_var` are updated in place.
template <typename T>
Var batch_norm(Tape<T>& tape, Var x, Var scale, Var offset, Tensor<T>& running_mean, Tensor<T>& running_var,
               Mode mode, const BatchNormSettings& settings = {}) {
    const auto& in = tape.value(x);
    const int C = in.dims.c;
    const std::size_t S = in.dims.spatial();
    const std::size_t M = S * static_cast<std::size_t>(in.dims.n);
    require(tape.value(scale).size() == static_cast<std::size_t>(C) &&
                tape.value(offset).size() == static_cast<std::size_t>(C) &&
                running_mean.size() == static_cast<std::size_t>(C) && running_var.size() == static_cast<std::size_t>(C),
            ErrorCode::ShapeMismatch, "batch_norm parameters vs " + in.dims.str());
    if (mode == Mode::Train)
        require(M >= 2, ErrorCode::DegenerateBatch, "batch_norm needs >= 2 values per channel, got " + std::to_string(M));

    std::vector<double> mean(static_cast<std::size_t>(C)), inv_std(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
        double m = 0.0, var = 0.0;
        if (mode == Mode::Train) {
            for (int n = 0; n < in.dims.n; ++n) {
                const T* p = in.channel(n, c);
                for (std::size_t i = 0; i < S; ++i) m += double(p[i]);
            }
            m /= static_cast<double>(M);
            for (int n = 0; n < in.dims.n; ++n) {
                const T* p = in.channel(n, c);
                for (std::size_t i = 0; i < S; ++i) {
                    const double d = double(p[i]) - m;
                    var += d * d;
                }
            }
            var /= static_cast<double>(M);
            const double unbiased = var * static_cast<double>(M) / static_cast<double>(M - 1);
            auto& rm = running_mean.data[static_cast<std::size_t>(c)];
            auto& rv = running_var.data[static_cast<std::size_t>(c)];
            rm = static_cast<T>(settings.momentum * double(rm) + (1.0 - settings.momentum) * m);
            rv = static_cast<T>(settings.momentum * double(rv) + (1.0 - settings.momentum) * unbiased);
        } else {
            m = double(running_mean.data[static_cast<std::size_t>(c)]);
            var = double(running_var.data[static_cast<std::size_t>(c)]);
        }
        mean[static_cast<std::size_t>(c)] = m;
        inv_std[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + settings.epsilon);
    }

    const auto& gamma = tape.value(scale);
    const auto& beta = tape.value(offset);
    Tensor<T> out(in.dims);
    for (int n = 0; n < in.dims.n; ++n)
        for (int c = 0; c < C; ++c) {
            const T* p = in.channel(n, c);
            T* q = out.channel(n, c);
            const double a = double(gamma.data[static_cast<std::size_t>(c)]) * inv_std[static_cast<std::size_t>(c)];
            const double b = double(beta.data[static_cast<std::size_t>(c)]) - a * mean[static_cast<std::size_t>(c)];
            for (std::size_t i = 0; i < S; ++i) q[i] = static_cast<T>(a * double(p[i]) + b);
        }

    const bool needs = tape.requires_grad(x) || tape.requires_grad(scale) || tape.requires_grad(offset);
    const int id = static_cast<int>(tape.size());
    return tape.push(std::move(out), needs, [x, scale, offset, id, mean, inv_std, mode, S, M](Tape<T>& t) {
        const auto& g = t.grad(Var{id});
        const auto& in = t.value(x);
        const auto& gamma = t.value(scale);
        const int C = in.dims.c;
        for (int c = 0; c < C; ++c) {
            const auto cu = static_cast<std::size_t>(c);
            double sum_g = 0.0, sum_gx = 0.0;
            for (int n = 0; n < in.dims.n; ++n) {
                const T* gp = g.channel(n, c);
                const T* p = in.channel(n, c);
                for (std::size_t i = 0; i < S; ++i) {
                    sum_g += double(gp[i]);
                    sum_gx += double(gp[i]) * (double(p[i]) - mean[cu]) * inv_std[cu];
                }
            }
            if (t.requires_grad(offset)) t.grad(offset).data[cu] += static_cast<T>(sum_g);
            if (t.requires_grad(scale)) t.grad(scale).data[cu] += static_cast<T>(sum_gx);
            if (!t.requires_grad(x)) continue;
            auto& gx = t.grad(x);
            const double gm = double(gamma.data[cu]) * inv_std[cu];
            for (int n = 0; n < in.dims.n; ++n) {
                const T* gp = g.channel(n, c);
                const T* p = in.channel(n, c);
                T* q = gx.channel(n, c);
                if (mode == Mode::Train) {
                    const double inv_m = 1.0 / static_cast<double>(M);
                    for (std::size_t i = 0; i < S; ++i) {
                        const double xhat = (double(p[i]) - mean[cu]) * inv_std[cu];
                        q[i] += static_cast<T>(gm * (double(gp[i]) - inv_m * sum_g - inv_m * xhat * sum_gx));
                    }
                } else {
                    for (std::size_t i = 0; i < S; ++i) q[i] += static_cast<T>(gm * double(gp[i]));
                }
            }
        }
    });
}

} // namespace ops
} // namespace ldreg
