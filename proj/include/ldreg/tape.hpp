#pragma once

// Minimal reverse-mode tape. Each recorded op owns its output value and a
// closure that pushes the output gradient back into its inputs. Backward
// walks the ops in exact reverse order; gradients add up at fan-out.

#include <functional>
#include <vector>

#include "ldreg/error.hpp"
#include "ldreg/tensor.hpp"

namespace ldreg {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

template <typename T>
class Tape {
public:
    using Backward = std::function<void(Tape&)>;

    Var constant(Tensor<T> value) { return push(std::move(value), false, {}); }
    Var input(Tensor<T> value, bool requires_grad = true) { return push(std::move(value), requires_grad, {}); }

    /// Leaf that refers to caller-owned storage (no copy). The tensor must
    /// outlive the tape.
    Var parameter(const Tensor<T>& value, bool requires_grad = true) {
        Node node;
        node.external = &value;
        node.requires_grad = requires_grad;
        nodes_.push_back(std::move(node));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Var push(Tensor<T> value, bool requires_grad, Backward backward) {
        Node node;
        node.value = std::move(value);
        node.requires_grad = requires_grad;
        node.backward = requires_grad ? std::move(backward) : Backward{};
        nodes_.push_back(std::move(node));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor<T>& value(Var v) const {
        const auto& node = at(v);
        return node.external != nullptr ? *node.external : node.value;
    }

    bool requires_grad(Var v) const { return at(v).requires_grad; }

    bool has_grad(Var v) const { return !at(v).grad.data.empty(); }

    /// Gradient slot, zero-initialised on first access.
    Tensor<T>& grad(Var v) {
        auto& node = at(v);
        if (node.grad.data.empty()) node.grad = Tensor<T>(value(v).dims);
        return node.grad;
    }

    /// Seeds d(out) with `seed` (or ones for a one-element output) and runs
    /// every recorded backward closure in reverse order.
    void backward(Var out, const Tensor<T>* seed = nullptr) {
        auto& g = grad(out);
        if (seed != nullptr) {
            require(seed->dims == g.dims, ErrorCode::ShapeMismatch, "seed dims " + seed->dims.str());
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += seed->data[i];
        } else {
            require(g.size() == 1, ErrorCode::ShapeMismatch, "backward without seed needs a scalar output");
            g.data[0] += T(1);
        }
        for (int id = out.id; id >= 0; --id) {
            auto& node = nodes_[static_cast<std::size_t>(id)];
            if (node.backward && !node.grad.data.empty()) node.backward(*this);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> value;
        const Tensor<T>* external = nullptr;
        Tensor<T> grad;
        bool requires_grad = false;
        Backward backward;
    };

    Node& at(Var v) {
        require(v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(), ErrorCode::InvalidArgument, "bad var");
        return nodes_[static_cast<std::size_t>(v.id)];
    }
    const Node& at(Var v) const {
        require(v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(), ErrorCode::InvalidArgument, "bad var");
        return nodes_[static_cast<std::size_t>(v.id)];
    }

    std::vector<Node> nodes_;
};

namespace ops {

template <typename T>
bool any_requires_grad(const Tape<T>& tape, std::initializer_list<Var> vars) {
    for (Var v : vars)
        if (tape.requires_grad(v)) return true;
    return false;
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
    const auto& in = tape.value(x);
    Tensor<T> out(in.dims);
    for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = in.data[i] > T(0) ? in.data[i] : T(0);
    const int id = static_cast<int>(tape.size());
    return tape.push(std::move(out), tape.requires_grad(x), [x, id](Tape<T>& t) {
        const auto& y = t.value(Var{id});
        const auto& gy = t.grad(Var{id});
        auto& gx = t.grad(x);
        for (std::size_t i = 0; i < gy.size(); ++i)
            if (y.data[i] > T(0)) gx.data[i] += gy.data[i];
    });
}

/// a + sign * b, equal dims.
template <typename T>
Var add(Tape<T>& tape, Var a, Var b, T sign = T(1)) {
    const auto& va = tape.value(a);
    const auto& vb = tape.value(b);
    require(va.dims == vb.dims, ErrorCode::ShapeMismatch, "add: " + va.dims.str() + " vs " + vb.dims.str());
    Tensor<T> out(va.dims);
    for (std::size_t i = 0; i < va.size(); ++i) out.data[i] = va.data[i] + sign * vb.data[i];
    const int id = static_cast<int>(tape.size());
    return tape.push(std::move(out), any_requires_grad(tape, {a, b}), [a, b, id, sign](Tape<T>& t) {
        const auto& gy = t.grad(Var{id});
        if (t.requires_grad(a)) {
            auto& ga = t.grad(a);
            for (std::size_t i = 0; i < gy.size(); ++i) ga.data[i] += gy.data[i];
        }
        if (t.requires_grad(b)) {
            auto& gb = t.grad(b);
            for (std::size_t i = 0; i < gy.size(); ++i) gb.data[i] += sign * gy.data[i];
        }
    });
}

template <typename T>
Var sub(Tape<T>& tape, Var a, Var b) {
    return add(tape, a, b, T(-1));
}

/// Concatenates along channels; batch and spatial dims must agree.
template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b) {
    const auto& va = tape.value(a);
    const auto& vb = tape.value(b);
    require(va.dims.n == vb.dims.n && va.dims.shape3() == vb.dims.shape3(), ErrorCode::ShapeMismatch,
            "concat: " + va.dims.str() + " vs " + vb.dims.str());
    Dims5 d = va.dims;
    d.c = va.dims.c + vb.dims.c;
    Tensor<T> out(d);
    const std::size_t sa = static_cast<std::size_t>(va.dims.c) * d.spatial();
    const std::size_t sb = static_cast<std::size_t>(vb.dims.c) * d.spatial();
    for (int n = 0; n < d.n; ++n) {
        std::copy_n(va.item(n), sa, out.item(n));
        std::copy_n(vb.item(n), sb, out.item(n) + sa);
    }
    const int id = static_cast<int>(tape.size());
    return tape.push(std::move(out), any_requires_grad(tape, {a, b}), [a, b, id, sa, sb](Tape<T>& t) {
        const auto& gy = t.grad(Var{id});
        for (int n = 0; n < gy.dims.n; ++n) {
            const T* src = gy.item(n);
            if (t.requires_grad(a)) {
                T* dst = t.grad(a).item(n);
                for (std::size_t i = 0; i < sa; ++i) dst[i] += src[i];
            }
            if (t.requires_grad(b)) {
                T* dst = t.grad(b).item(n);
                for (std::size_t i = 0; i < sb; ++i) dst[i] += src[sa + i];
            }
        }
    });
}

namespace detail {
template <typename T>
void copy_box(const Tensor<T>& src, Tensor<T>& dst, const Shape3& extent, bool accumulate) {
    for (int n = 0; n < src.dims.n; ++n)
        for (int c = 0; c < src.dims.c; ++c) {
            const T* s = src.channel(n, c);
            T* d = dst.channel(n, c);
            for (int z = 0; z < extent[2]; ++z)
                for (int y = 0; y < extent[1]; ++y) {
                    const T* srow = s + (static_cast<std::size_t>(z) * src.dims.y + y) * src.dims.x;
                    T* drow = d + (static_cast<std::size_t>(z) * dst.dims.y + y) * dst.dims.x;
                    for (int x = 0; x < extent[0]; ++x) drow[x] = accumulate ? drow[x] + srow[x] : srow[x];
                }
        }
}
} // namespace detail

/// Zero-pads the high end of each spatial axis up to `target`.
template <typename T>
Var pad_spatial(Tape<T>& tape, Var x, const Shape3& target) {
    const auto& in = tape.value(x);
    if (in.dims.shape3() == target) return x;
    const Shape3 extent = in.dims.shape3();
    for (int a = 0; a < 3; ++a) require(target[a] >= extent[a], ErrorCode::ShapeMismatch, "pad target too small");
    Dims5 d = in.dims;
    d.x = target[0];
    d.y = target[1];
    d.z = target[2];
    Tensor<T> out(d);
    detail::copy_box(in, out, extent, false);
    const int id = static_cast<int>(tape.size());
    return tape.push(std::move(out), tape.requires_grad(x), [x, id, extent](Tape<T>& t) {
        detail::copy_box(t.grad(Var{id}), t.grad(x), extent, true);
    });
}

/// Keeps the low corner block of the given spatial extent.
template <typename T>
Var crop_spatial(Tape<T>& tape, Var x, const Shape3& extent) {
    const auto& in = tape.value(x);
    if (in.dims.shape3() == extent) return x;
    for (int a = 0; a < 3; ++a)
        require(extent[a] <= in.dims.shape3()[a], ErrorCode::ShapeMismatch, "crop larger than input");
    Dims5 d = in.dims;
    d.x = extent[0];
    d.y = extent[1];
    d.z = extent[2];
    Tensor<T> out(d);
    detail::copy_box(in, out, extent, false);
    const int id = static_cast<int>(tape.size());
    return tape.push(std::move(out), tape.requires_grad(x), [x, id, extent](Tape<T>& t) {
        detail::copy_box(t.grad(Var{id}), t.grad(x), extent, true);
    });
}

/// Flatten each batch item, then y = W x + b with W (out, in, 1, 1, 1) and
/// b (1, out, 1, 1, 1). Output dims (n, out, 1, 1, 1).
template <typename T>
Var dense(Tape<T>& tape, Var x, Var w, Var b) {
    const auto& in = tape.value(x);
    const auto& W = tape.value(w);
    const auto& B = tape.value(b);
    const std::size_t n_in = static_cast<std::size_t>(in.dims.c) * in.dims.spatial();
    const int n_out = W.dims.n;
    require(static_cast<std::size_t>(W.dims.c) == n_in && W.dims.spatial() == 1, ErrorCode::ShapeMismatch,
            "dense: weight " + W.dims.str() + " vs input " + in.dims.str());
    require(B.size() == static_cast<std::size_t>(n_out), ErrorCode::ShapeMismatch, "dense bias");
    Tensor<T> out(Dims5{in.dims.n, n_out, 1, 1, 1});
    for (int n = 0; n < in.dims.n; ++n) {
        const T* xi = in.item(n);
        for (int o = 0; o < n_out; ++o) {
            const T* row = W.data.data() + static_cast<std::size_t>(o) * n_in;
            double acc = double(B.data[static_cast<std::size_t>(o)]);
            for (std::size_t i = 0; i < n_in; ++i) acc += double(row[i]) * double(xi[i]);
            out.data[static_cast<std::size_t>(n) * n_out + o] = static_cast<T>(acc);
        }
    }
    const int id = static_cast<int>(tape.size());
    return tape.push(std::move(out), any_requires_grad(tape, {x, w, b}), [x, w, b, id, n_in, n_out](Tape<T>& t) {
        const auto& gy = t.grad(Var{id});
        const auto& in = t.value(x);
        const auto& W = t.value(w);
        for (int n = 0; n < in.dims.n; ++n) {
            const T* g = gy.data.data() + static_cast<std::size_t>(n) * n_out;
            if (t.requires_grad(b)) {
                auto& gb = t.grad(b);
                for (int o = 0; o < n_out; ++o) gb.data[static_cast<std::size_t>(o)] += g[o];
            }
            if (t.requires_grad(w)) {
                auto& gw = t.grad(w);
                const T* xi = in.item(n);
                for (int o = 0; o < n_out; ++o) {
                    T* row = gw.data.data() + static_cast<std::size_t>(o) * n_in;
                    for (std::size_t i = 0; i < n_in; ++i) row[i] += g[o] * xi[i];
                }
            }
            if (t.requires_grad(x)) {
                T* gx = t.grad(x).item(n);
                for (int o = 0; o < n_out; ++o) {
                    const T* row = W.data.data() + static_cast<std::size_t>(o) * n_in;
                    for (std::size_t i = 0; i < n_in; ++i) gx[i] += g[o] * row[i];
                }
            }
        }
    });
}

/// y[n, c] = s[c] x[n, c] for (n, C, 1, 1, 1) inputs with fixed scales s.
template <typename T>
Var scale_channels(Tape<T>& tape, Var x, std::vector<double> s) {
    const auto& in = tape.value(x);
    require(in.dims.spatial() == 1 && static_cast<std::size_t>(in.dims.c) == s.size(), ErrorCode::ShapeMismatch,
            "scale_channels: input " + in.dims.str());
    Tensor<T> out(in.dims);
    const std::size_t c = s.size();
    for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = static_cast<T>(s[i % c] * double(in.data[i]));
    const int id = static_cast<int>(tape.size());
    return tape.push(std::move(out), tape.requires_grad(x), [x, id, s = std::move(s)](Tape<T>& t) {
        const auto& gy = t.grad(Var{id});
        auto& gx = t.grad(x);
        for (std::size_t i = 0; i < gy.size(); ++i) gx.data[i] += static_cast<T>(s[i % s.size()] * double(gy.data[i]));
    });
}

/// Weighted sum of one-element vars.
template <typename T>
Var weighted_sum(Tape<T>& tape, const std::vector<Var>& terms, const std::vector<double>& weights) {
    require(terms.size() == weights.size(), ErrorCode::InvalidArgument, "weighted_sum arity");
    double total = 0.0;
    bool grad = false;
    for (std::size_t k = 0; k < terms.size(); ++k) {
        require(tape.value(terms[k]).size() == 1, ErrorCode::ShapeMismatch, "weighted_sum needs scalars");
        total += weights[k] * double(tape.value(terms[k]).data[0]);
        grad = grad || tape.requires_grad(terms[k]);
    }
    const int id = static_cast<int>(tape.size());
    return tape.push(Tensor<T>(Dims5{}, static_cast<T>(total)), grad, [terms, weights, id](Tape<T>& t) {
        const T g = t.grad(Var{id}).data[0];
        for (std::size_t k = 0; k < terms.size(); ++k)
            if (t.requires_grad(terms[k])) t.grad(terms[k]).data[0] += static_cast<T>(weights[k]) * g;
    });
}

} // namespace ops
} // namespace ldreg
