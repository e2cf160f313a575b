#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ldreg/error.hpp"
#include "ldreg/volume.hpp"

namespace ldreg {

/// (batch, channels, Nx, Ny, Nz). Kernels reuse the layout as
/// (out_channels, in_channels, kx, ky, kz).
struct Dims5 {
    int n = 1, c = 1, x = 1, y = 1, z = 1;

    std::size_t spatial() const { return static_cast<std::size_t>(x) * y * z; }
    std::size_t count() const { return static_cast<std::size_t>(n) * c * spatial(); }
    Shape3 shape3() const { return {x, y, z}; }
    bool operator==(const Dims5&) const = default;

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(x) + "," + std::to_string(y) +
               "," + std::to_string(z) + ")";
    }
};

template <typename T>
struct Tensor {
    Dims5 dims;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(const Dims5& d, T fill = T(0)) : dims(d), data(d.count(), fill) {}
    Tensor(const Dims5& d, std::vector<T> values) : dims(d), data(std::move(values)) {
        require(data.size() == d.count(), ErrorCode::ShapeMismatch, "tensor data does not match dims " + d.str());
    }

    std::size_t size() const { return data.size(); }

    T* channel(int n, int c) { return data.data() + (static_cast<std::size_t>(n) * dims.c + c) * dims.spatial(); }
    const T* channel(int n, int c) const {
        return data.data() + (static_cast<std::size_t>(n) * dims.c + c) * dims.spatial();
    }
    T* item(int n) { return channel(n, 0); }
    const T* item(int n) const { return channel(n, 0); }
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
    Tensor<To> out(t.dims);
    for (std::size_t i = 0; i < t.size(); ++i) out.data[i] = static_cast<To>(t.data[i]);
    return out;
}

/// Stacks equally-shaped volumes as channels of one batch item.
template <typename T, typename V>
Tensor<T> stack_channels(const std::vector<const BasicVolume<V>*>& channels) {
    require(!channels.empty(), ErrorCode::InvalidArgument, "no channels to stack");
    const auto shape = channels.front()->shape;
    Tensor<T> out(Dims5{1, static_cast<int>(channels.size()), shape[0], shape[1], shape[2]});
    for (std::size_t c = 0; c < channels.size(); ++c) {
        require(channels[c]->shape == shape, ErrorCode::ShapeMismatch, "channel shapes differ");
        T* dst = out.channel(0, static_cast<int>(c));
        for (std::size_t i = 0; i < channels[c]->size(); ++i) dst[i] = static_cast<T>(channels[c]->data[i]);
    }
    return out;
}

/// Concatenates single-item tensors along the batch axis.
template <typename T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& items) {
    require(!items.empty(), ErrorCode::InvalidArgument, "empty batch");
    Dims5 d = items.front().dims;
    d.n = 0;
    for (const auto& t : items) {
        require(t.dims.c == d.c && t.dims.shape3() == d.shape3(), ErrorCode::ShapeMismatch, "batch items differ");
        d.n += t.dims.n;
    }
    Tensor<T> out(d);
    std::size_t offset = 0;
    for (const auto& t : items) {
        std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(offset));
        offset += t.size();
    }
    return out;
}

} // namespace ldreg
