#pragma once

// 3D convolutions with zero "same" padding. Kernels are (out, in, k, k, k)
// for k in {1, 3}; the stride-2 transpose convolution stores its kernel as
// (in, out, 3, 3, 3) so that it is exactly the adjoint of the stride-2
// convolution sharing that kernel.

#include <algorithm>
#include <array>
#include <vector>

#include "ldreg/error.hpp"
#include "ldreg/tape.hpp"
#include "ldreg/tensor.hpp"

namespace ldreg {

namespace kernels {

inline void check_kernel(const Dims5& w) {
    require(w.x == w.y && w.y == w.z && (w.x == 1 || w.x == 3), ErrorCode::ShapeMismatch,
            "kernel must be 1x1x1 or 3x3x3, got " + w.str());
}

/// out[n, co] = bias[co] + sum_ci,k w[co, ci, k] in[n, ci, stride * o + k - pad].
/// `out` must already have the right dims.
template <typename T, int Stride>
void conv_forward(const Tensor<T>& in, const Tensor<T>& w, const T* bias, Tensor<T>& out) {
    const int K = w.dims.x, pad = K / 2;
    const int nx = in.dims.x, ny = in.dims.y, nz = in.dims.z;
    const int ox = out.dims.x, oy = out.dims.y, oz = out.dims.z;
    const int cin = in.dims.c, cout = out.dims.c;
    const std::size_t ksz = static_cast<std::size_t>(K) * K * K;
    std::vector<T> acc(static_cast<std::size_t>(ox));

    for (int n = 0; n < in.dims.n; ++n)
        for (int co = 0; co < cout; ++co) {
            T* dst = out.channel(n, co);
            const T b = bias != nullptr ? bias[co] : T(0);
            for (int z = 0; z < oz; ++z)
                for (int y = 0; y < oy; ++y) {
                    std::fill(acc.begin(), acc.end(), b);
                    for (int ci = 0; ci < cin; ++ci) {
                        const T* src = in.channel(n, ci);
                        const T* wk = w.data.data() + (static_cast<std::size_t>(co) * cin + ci) * ksz;
                        for (int kz = 0; kz < K; ++kz) {
                            const int iz = Stride * z + kz - pad;
                            if (iz < 0 || iz >= nz) continue;
                            for (int ky = 0; ky < K; ++ky) {
                                const int iy = Stride * y + ky - pad;
                                if (iy < 0 || iy >= ny) continue;
                                const T* row = src + (static_cast<std::size_t>(iz) * ny + iy) * nx;
                                const T* wr = wk + (static_cast<std::size_t>(kz) * K + ky) * K;
                                T* a = acc.data();
                                if (K == 1) {
                                    const T w0 = wr[0];
                                    for (int x = 0; x < ox; ++x) a[x] += w0 * row[Stride * x];
                                } else if constexpr (Stride == 1) {
                                    const T w0 = wr[0], w1 = wr[1], w2 = wr[2];
                                    if (ox == 1) {
                                        a[0] += w1 * row[0];
                                        continue;
                                    }
                                    a[0] += w1 * row[0] + w2 * row[1];
                                    for (int x = 1; x < ox - 1; ++x)
                                        a[x] += w0 * row[x - 1] + w1 * row[x] + w2 * row[x + 1];
                                    a[ox - 1] += w0 * row[ox - 2] + w1 * row[ox - 1];
                                } else {
                                    const T w0 = wr[0], w1 = wr[1], w2 = wr[2];
                                    a[0] += w1 * row[0] + w2 * row[1];
                                    for (int x = 1; x < ox; ++x)
                                        a[x] += w0 * row[2 * x - 1] + w1 * row[2 * x] + w2 * row[2 * x + 1];
                                }
                            }
                        }
                    }
                    std::copy(acc.begin(), acc.end(), dst + (static_cast<std::size_t>(z) * oy + y) * ox);
                }
        }
}

/// Channel volumes copied into a zero border of one voxel so that every 3x3x3
/// tap becomes a constant shift of the flat index.
template <typename T>
struct PaddedVolumes {
    int px = 0, py = 0, pz = 0;
    std::size_t plane = 0, total = 0;
    int channels = 0;
    std::vector<T> data;

    PaddedVolumes(const Dims5& d, int n_channels) : px(d.x + 2), py(d.y + 2), pz(d.z + 2), channels(n_channels) {
        plane = static_cast<std::size_t>(px) * py;
        total = plane * pz;
        data.assign(total * static_cast<std::size_t>(channels), T(0));
    }

    T* channel(int c) { return data.data() + static_cast<std::size_t>(c) * total; }
    const T* channel(int c) const { return data.data() + static_cast<std::size_t>(c) * total; }

    void load(const T* src, int c, const Dims5& d) {
        T* dst = channel(c);
        for (int z = 0; z < d.z; ++z)
            for (int y = 0; y < d.y; ++y)
                std::copy_n(src + (static_cast<std::size_t>(z) * d.y + y) * d.x, d.x,
                            dst + (static_cast<std::size_t>(z + 1) * py + y + 1) * px + 1);
    }

    void store(int c, const Dims5& d, T* out) const {
        const T* src = channel(c);
        for (int z = 0; z < d.z; ++z)
            for (int y = 0; y < d.y; ++y)
                std::copy_n(src + (static_cast<std::size_t>(z + 1) * py + y + 1) * px + 1, d.x,
                            out + (static_cast<std::size_t>(z) * d.y + y) * d.x);
    }

    /// Flat range whose 27 neighbours all lie inside the buffer.
    std::size_t begin() const { return plane + static_cast<std::size_t>(px) + 1; }
    std::size_t end() const { return total - plane - static_cast<std::size_t>(px) - 1; }

    std::array<std::ptrdiff_t, 27> offsets() const {
        std::array<std::ptrdiff_t, 27> off{};
        int k = 0;
        for (int kz = -1; kz <= 1; ++kz)
            for (int ky = -1; ky <= 1; ++ky)
                for (int kx = -1; kx <= 1; ++kx)
                    off[static_cast<std::size_t>(k++)] =
                        static_cast<std::ptrdiff_t>(kz) * static_cast<std::ptrdiff_t>(plane) +
                        static_cast<std::ptrdiff_t>(ky) * px + kx;
        return off;
    }
};

/// Stride-1 3x3x3 convolution on padded flat buffers. Results at border
/// positions of the padded output are garbage and are never stored.
template <typename T>
void conv3_stride1(const Tensor<T>& in, const Tensor<T>& w, const T* bias, Tensor<T>& out) {
    const int cin = in.dims.c, cout = out.dims.c;
    constexpr int kBlock = 4;
    constexpr std::size_t kChunk = 256;
    PaddedVolumes<T> src(in.dims, cin);
    PaddedVolumes<T> dst(in.dims, cout);
    const auto off = src.offsets();
    const std::size_t j_begin = src.begin(), j_end = src.end();
    alignas(64) T acc[kBlock][kChunk];

    for (int n = 0; n < in.dims.n; ++n) {
        for (int ci = 0; ci < cin; ++ci) src.load(in.channel(n, ci), ci, in.dims);
        for (int co0 = 0; co0 < cout; co0 += kBlock) {
            const int nb = std::min(kBlock, cout - co0);
            for (std::size_t j0 = j_begin; j0 < j_end; j0 += kChunk) {
                const std::size_t len = std::min(kChunk, j_end - j0);
                for (int b = 0; b < nb; ++b) {
                    const T init = bias != nullptr ? bias[co0 + b] : T(0);
                    for (std::size_t j = 0; j < len; ++j) acc[b][j] = init;
                }
                for (int ci = 0; ci < cin; ++ci) {
                    const T* base = src.channel(ci) + j0;
                    for (std::size_t k = 0; k < 27; ++k) {
                        const T* p = base + off[k];
                        if (nb == kBlock) {
                            const T w0 = w.data[(static_cast<std::size_t>(co0 + 0) * cin + ci) * 27 + k];
                            const T w1 = w.data[(static_cast<std::size_t>(co0 + 1) * cin + ci) * 27 + k];
                            const T w2 = w.data[(static_cast<std::size_t>(co0 + 2) * cin + ci) * 27 + k];
                            const T w3 = w.data[(static_cast<std::size_t>(co0 + 3) * cin + ci) * 27 + k];
                            T* a0 = acc[0];
                            T* a1 = acc[1];
                            T* a2 = acc[2];
                            T* a3 = acc[3];
                            for (std::size_t j = 0; j < len; ++j) {
                                const T v = p[j];
                                a0[j] += w0 * v;
                                a1[j] += w1 * v;
                                a2[j] += w2 * v;
                                a3[j] += w3 * v;
                            }
                        } else {
                            for (int b = 0; b < nb; ++b) {
                                const T wb = w.data[(static_cast<std::size_t>(co0 + b) * cin + ci) * 27 + k];
                                T* a = acc[b];
                                for (std::size_t j = 0; j < len; ++j) a[j] += wb * p[j];
                            }
                        }
                    }
                }
                for (int b = 0; b < nb; ++b) std::copy_n(acc[b], len, dst.channel(co0 + b) + j0);
            }
        }
        for (int co = 0; co < cout; ++co) dst.store(co, out.dims, out.channel(n, co));
    }
}

/// Weight gradient of conv3_stride1: gw[co, ci, k] += sum_j g[co, j] in[ci, j + off_k].
template <typename T>
void conv3_stride1_weight_grad(const Tensor<T>& in, const Tensor<T>& g, Tensor<T>& gw) {
    const int cin = in.dims.c, cout = g.dims.c;
    constexpr std::size_t kChunk = 512;
    PaddedVolumes<T> src(in.dims, cin);
    PaddedVolumes<T> grad(in.dims, cout); // zero border => garbage positions contribute nothing
    const auto off = src.offsets();
    const std::size_t j_begin = src.begin(), j_end = src.end();
    std::vector<double> total(gw.size(), 0.0);

    for (int n = 0; n < in.dims.n; ++n) {
        for (int ci = 0; ci < cin; ++ci) src.load(in.channel(n, ci), ci, in.dims);
        for (int co = 0; co < cout; ++co) grad.load(g.channel(n, co), co, g.dims);
        for (std::size_t j0 = j_begin; j0 < j_end; j0 += kChunk) {
            const std::size_t len = std::min(kChunk, j_end - j0);
            for (int co = 0; co < cout; ++co) {
                const T* gp = grad.channel(co) + j0;
                for (int ci = 0; ci < cin; ++ci) {
                    const T* base = src.channel(ci) + j0;
                    double* dst = total.data() + (static_cast<std::size_t>(co) * cin + ci) * 27;
                    for (std::size_t k = 0; k < 27; ++k) {
                        const T* p = base + off[k];
                        T s = T(0);
#pragma omp simd reduction(+ : s)
                        for (std::size_t j = 0; j < len; ++j) s += gp[j] * p[j];
                        dst[k] += double(s);
                    }
                }
            }
        }
    }
    for (std::size_t i = 0; i < gw.size(); ++i) gw.data[i] += static_cast<T>(total[i]);
}

/// Weight gradient of conv_forward: gw[co, ci, k] += sum g[n, co, o] in[n, ci, stride * o + k - pad].
template <typename T, int Stride>
void conv_weight_grad(const Tensor<T>& in, const Tensor<T>& g, Tensor<T>& gw) {
    const int K = gw.dims.x, pad = K / 2;
    const int nx = in.dims.x, ny = in.dims.y, nz = in.dims.z;
    const int ox = g.dims.x, oy = g.dims.y, oz = g.dims.z;
    const int cin = in.dims.c, cout = g.dims.c;
    const std::size_t ksz = static_cast<std::size_t>(K) * K * K;
    // one accumulator row per kernel tap keeps the inner loop element-wise
    std::vector<T> acc(ksz * static_cast<std::size_t>(ox));

    for (int co = 0; co < cout; ++co)
        for (int ci = 0; ci < cin; ++ci) {
            std::fill(acc.begin(), acc.end(), T(0));
            for (int n = 0; n < in.dims.n; ++n) {
                const T* src = in.channel(n, ci);
                const T* gc = g.channel(n, co);
                for (int z = 0; z < oz; ++z)
                    for (int y = 0; y < oy; ++y) {
                        const T* grow = gc + (static_cast<std::size_t>(z) * oy + y) * ox;
                        for (int kz = 0; kz < K; ++kz) {
                            const int iz = Stride * z + kz - pad;
                            if (iz < 0 || iz >= nz) continue;
                            for (int ky = 0; ky < K; ++ky) {
                                const int iy = Stride * y + ky - pad;
                                if (iy < 0 || iy >= ny) continue;
                                const T* row = src + (static_cast<std::size_t>(iz) * ny + iy) * nx;
                                T* a = acc.data() + (static_cast<std::size_t>(kz) * K + ky) * K * ox;
                                if (K == 1) {
                                    for (int x = 0; x < ox; ++x) a[x] += grow[x] * row[Stride * x];
                                    continue;
                                }
                                T* a0 = a;
                                T* a1 = a + ox;
                                T* a2 = a + 2 * ox;
                                for (int x = 1; x < ox; ++x) a0[x] += grow[x] * row[Stride * x - 1];
                                for (int x = 0; x < ox; ++x) a1[x] += grow[x] * row[Stride * x];
                                const int last = Stride == 1 ? ox - 1 : ox; // Stride * x + 1 < nx
                                for (int x = 0; x < last; ++x) a2[x] += grow[x] * row[Stride * x + 1];
                            }
                        }
                    }
            }
            T* dst = gw.data.data() + (static_cast<std::size_t>(co) * cin + ci) * ksz;
            for (std::size_t k = 0; k < ksz; ++k) {
                double s = 0.0;
                const T* a = acc.data() + k * ox;
                for (int x = 0; x < ox; ++x) s += double(a[x]);
                dst[k] += static_cast<T>(s);
            }
        }
}

/// Stride-2 transpose convolution: out[n, co, 2 o + k - 1] += w[ci, co, k] in[n, ci, o].
/// `out` must be sized and pre-filled (bias or zero).
template <typename T>
void conv_transpose_accumulate(const Tensor<T>& in, const Tensor<T>& w, Tensor<T>& out) {
    const int K = 3;
    const int nx = in.dims.x, ny = in.dims.y, nz = in.dims.z;
    const int ox = out.dims.x, oy = out.dims.y, oz = out.dims.z;
    const int cin = in.dims.c, cout = out.dims.c;
    const std::size_t ksz = 27;
    for (int n = 0; n < in.dims.n; ++n)
        for (int co = 0; co < cout; ++co) {
            T* dst = out.channel(n, co);
            for (int ci = 0; ci < cin; ++ci) {
                const T* src = in.channel(n, ci);
                const T* wk = w.data.data() + (static_cast<std::size_t>(ci) * cout + co) * ksz;
                for (int z = 0; z < nz; ++z)
                    for (int kz = 0; kz < K; ++kz) {
                        const int tz = 2 * z + kz - 1;
                        if (tz < 0 || tz >= oz) continue;
                        for (int y = 0; y < ny; ++y) {
                            const T* row = src + (static_cast<std::size_t>(z) * ny + y) * nx;
                            for (int ky = 0; ky < K; ++ky) {
                                const int ty = 2 * y + ky - 1;
                                if (ty < 0 || ty >= oy) continue;
                                const T* wr = wk + (static_cast<std::size_t>(kz) * K + ky) * K;
                                const T w0 = wr[0], w1 = wr[1], w2 = wr[2];
                                T* orow = dst + (static_cast<std::size_t>(tz) * oy + ty) * ox;
                                // even outputs take tap 1, odd outputs taps 2 and 0
                                for (int x = 0; x < nx; ++x) {
                                    orow[2 * x] += w1 * row[x];
                                    orow[2 * x + 1] += w2 * row[x];
                                }
                                for (int x = 1; x < nx; ++x) orow[2 * x - 1] += w0 * row[x];
                            }
                        }
                    }
            }
        }
}

template <typename T>
Tensor<T> flip_transpose_kernel(const Tensor<T>& w) {
    const int K = w.dims.x;
    Tensor<T> out(Dims5{w.dims.c, w.dims.n, K, K, K});
    for (int co = 0; co < w.dims.n; ++co)
        for (int ci = 0; ci < w.dims.c; ++ci)
            for (int kz = 0; kz < K; ++kz)
                for (int ky = 0; ky < K; ++ky)
                    for (int kx = 0; kx < K; ++kx)
                        out.data[(((static_cast<std::size_t>(ci) * w.dims.n + co) * K + (K - 1 - kz)) * K +
                                  (K - 1 - ky)) *
                                     K +
                                 (K - 1 - kx)] =
                            w.data[(((static_cast<std::size_t>(co) * w.dims.c + ci) * K + kz) * K + ky) * K + kx];
    return out;
}

template <typename T>
void add_bias_grad(const Tensor<T>& g, Tensor<T>& gb) {
    for (int c = 0; c < g.dims.c; ++c) {
        double s = 0.0;
        for (int n = 0; n < g.dims.n; ++n) {
            const T* p = g.channel(n, c);
            for (std::size_t i = 0; i < g.dims.spatial(); ++i) s += double(p[i]);
        }
        gb.data[static_cast<std::size_t>(c)] += static_cast<T>(s);
    }
}

} // namespace kernels

namespace ops {

/// Same-padded 3D convolution, stride 1 or 2 (stride 2 needs even dims).
template <typename T>
Var conv3d(Tape<T>& tape, Var x, Var w, Var b, int stride = 1) {
    const auto& in = tape.value(x);
    const auto& W = tape.value(w);
    kernels::check_kernel(W.dims);
    require(W.dims.c == in.dims.c, ErrorCode::ShapeMismatch,
            "conv3d: kernel " + W.dims.str() + " vs input " + in.dims.str());
    require(stride == 1 || stride == 2, ErrorCode::InvalidArgument, "stride must be 1 or 2");
    const T* bias = nullptr;
    if (b.valid()) {
        require(tape.value(b).size() == static_cast<std::size_t>(W.dims.n), ErrorCode::ShapeMismatch, "conv bias");
        bias = tape.value(b).data.data();
    }
    Dims5 d = in.dims;
    d.c = W.dims.n;
    if (stride == 2) {
        require(in.dims.x % 2 == 0 && in.dims.y % 2 == 0 && in.dims.z % 2 == 0, ErrorCode::OddDimensionForStride2,
                "stride-2 conv on " + in.dims.str());
        d.x /= 2;
        d.y /= 2;
        d.z /= 2;
    }
    Tensor<T> out(d);
    if (stride == 1 && W.dims.x == 3)
        kernels::conv3_stride1(in, W, bias, out);
    else if (stride == 1)
        kernels::conv_forward<T, 1>(in, W, bias, out);
    else
        kernels::conv_forward<T, 2>(in, W, bias, out);

    const bool needs = tape.requires_grad(x) || tape.requires_grad(w) || (b.valid() && tape.requires_grad(b));
    const int id = static_cast<int>(tape.size());
    return tape.push(std::move(out), needs, [x, w, b, id, stride](Tape<T>& t) {
        const auto& g = t.grad(Var{id});
        const auto& in = t.value(x);
        const auto& W = t.value(w);
        if (b.valid() && t.requires_grad(b)) kernels::add_bias_grad(g, t.grad(b));
        if (t.requires_grad(w)) {
            if (stride == 1 && W.dims.x == 3)
                kernels::conv3_stride1_weight_grad(in, g, t.grad(w));
            else if (stride == 1)
                kernels::conv_weight_grad<T, 1>(in, g, t.grad(w));
            else
                kernels::conv_weight_grad<T, 2>(in, g, t.grad(w));
        }
        if (t.requires_grad(x)) {
            auto& gx = t.grad(x);
            if (stride == 1) {
                const auto flipped = kernels::flip_transpose_kernel(W);
                Tensor<T> tmp(gx.dims);
                if (W.dims.x == 3)
                    kernels::conv3_stride1(g, flipped, static_cast<const T*>(nullptr), tmp);
                else
                    kernels::conv_forward<T, 1>(g, flipped, nullptr, tmp);
                for (std::size_t i = 0; i < tmp.size(); ++i) gx.data[i] += tmp.data[i];
            } else if (W.dims.x == 3) {
                kernels::conv_transpose_accumulate(g, W, gx);
            } else {
                // 1x1x1 stride 2: scatter onto even voxels
                for (int n = 0; n < g.dims.n; ++n)
                    for (int ci = 0; ci < W.dims.c; ++ci) {
                        T* dst = gx.channel(n, ci);
                        for (int co = 0; co < W.dims.n; ++co) {
                            const T wv = W.data[static_cast<std::size_t>(co) * W.dims.c + ci];
                            const T* src = g.channel(n, co);
                            for (int z = 0; z < g.dims.z; ++z)
                                for (int y = 0; y < g.dims.y; ++y)
                                    for (int xx = 0; xx < g.dims.x; ++xx)
                                        dst[(static_cast<std::size_t>(2 * z) * gx.dims.y + 2 * y) * gx.dims.x +
                                            2 * xx] += wv * src[(static_cast<std::size_t>(z) * g.dims.y + y) *
                                                                    g.dims.x +
                                                                xx];
                        }
                    }
            }
        }
    });
}

/// Stride-2 transpose convolution doubling every spatial dim; kernel
/// (in, out, 3, 3, 3).
template <typename T>
Var conv3d_transpose(Tape<T>& tape, Var x, Var w, Var b) {
    const auto& in = tape.value(x);
    const auto& W = tape.value(w);
    require(W.dims.x == 3 && W.dims.y == 3 && W.dims.z == 3, ErrorCode::ShapeMismatch, "transpose kernel must be 3x3x3");
    require(W.dims.n == in.dims.c, ErrorCode::ShapeMismatch,
            "conv3d_transpose: kernel " + W.dims.str() + " vs input " + in.dims.str());
    Dims5 d = in.dims;
    d.c = W.dims.c;
    d.x *= 2;
    d.y *= 2;
    d.z *= 2;
    Tensor<T> out(d);
    if (b.valid()) {
        const auto& B = tape.value(b);
        require(B.size() == static_cast<std::size_t>(d.c), ErrorCode::ShapeMismatch, "transpose bias");
        for (int n = 0; n < d.n; ++n)
            for (int c = 0; c < d.c; ++c) std::fill_n(out.channel(n, c), d.spatial(), B.data[static_cast<std::size_t>(c)]);
    }
    kernels::conv_transpose_accumulate(in, W, out);

    const bool needs = tape.requires_grad(x) || tape.requires_grad(w) || (b.valid() && tape.requires_grad(b));
    const int id = static_cast<int>(tape.size());
    return tape.push(std::move(out), needs, [x, w, b, id](Tape<T>& t) {
        const auto& g = t.grad(Var{id});
        const auto& in = t.value(x);
        const auto& W = t.value(w);
        if (b.valid() && t.requires_grad(b)) kernels::add_bias_grad(g, t.grad(b));
        // adjoint relations with the stride-2 convolution
        if (t.requires_grad(w)) kernels::conv_weight_grad<T, 2>(g, in, t.grad(w));
        if (t.requires_grad(x)) {
            auto& gx = t.grad(x);
            Tensor<T> tmp(gx.dims);
            kernels::conv_forward<T, 2>(g, W, nullptr, tmp);
            for (std::size_t i = 0; i < tmp.size(); ++i) gx.data[i] += tmp.data[i];
        }
    });
}

} // namespace ops
} // namespace ldreg
