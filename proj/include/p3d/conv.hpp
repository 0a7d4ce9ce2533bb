#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "p3d/concurrency.hpp"
#include "p3d/error.hpp"
#include "p3d/tensor.hpp"

namespace p3d {

enum class PadMode { kSame, kValid };
enum class Activation { kRelu, kSigmoid };

struct Dims3 {
    std::int64_t d = 1, h = 1, w = 1;
};

// Kernel stack plus one scalar bias per output channel. Planar iff kd == 1.
// Convolution here is cross-correlation (no kernel flip), the convention of
// the deep-learning libraries this toolkit mirrors.
template <typename T>
struct ConvWeightsT {
    TensorT<T> kernels;     // (out_channels, in_channels, kd, kh, kw)
    std::vector<T> biases;  // length out_channels
    Dims3 dilation{1, 1, 1};
    Dims3 stride{1, 1, 1};
    PadMode padding = PadMode::kValid;

    std::int64_t out_channels() const { return kernels.extent(0); }
    std::int64_t in_channels() const { return kernels.extent(1); }
    std::int64_t kd() const { return kernels.extent(2); }
    std::int64_t kh() const { return kernels.extent(3); }
    std::int64_t kw() const { return kernels.extent(4); }
    bool is_planar() const { return kd() == 1; }

    void validate() const {
        if (kernels.rank() != 5)
            throw DimensionError("conv weights must have rank-5 kernels, got rank " +
                                 std::to_string(kernels.rank()));
        if (static_cast<std::int64_t>(biases.size()) != out_channels())
            throw DimensionError("bias length " + std::to_string(biases.size()) +
                                 " != out_channels " + std::to_string(out_channels()));
        if (dilation.d <= 0 || dilation.h <= 0 || dilation.w <= 0 || stride.d <= 0 ||
            stride.h <= 0 || stride.w <= 0)
            throw ContractError("stride and dilation must be positive");
    }
};

template <typename T>
struct Kernel2DT {
    TensorT<T> kernels;     // (out_channels, in_channels, kh, kw)
    std::vector<T> biases;  // length out_channels

    std::int64_t out_channels() const { return kernels.extent(0); }
    std::int64_t in_channels() const { return kernels.extent(1); }
    std::int64_t kh() const { return kernels.extent(2); }
    std::int64_t kw() const { return kernels.extent(3); }

    void validate() const {
        if (kernels.rank() != 4)
            throw DimensionError("2d kernel stack must have rank 4, got rank " +
                                 std::to_string(kernels.rank()));
        if (static_cast<std::int64_t>(biases.size()) != out_channels())
            throw DimensionError("bias length " + std::to_string(biases.size()) +
                                 " != out_channels " + std::to_string(out_channels()));
    }
};

using ConvWeights = ConvWeightsT<float>;
using Kernel2D = Kernel2DT<float>;

struct AxisGeom {
    std::int64_t out = 0;
    std::int64_t pad_lo = 0;
    std::int64_t pad_hi = 0;
};

// SAME pads with zeros, split symmetrically with the extra element on the
// high side; unit stride then preserves the extent for any kernel size.
inline AxisGeom resolve_axis(std::int64_t in, std::int64_t k, std::int64_t stride,
                             std::int64_t dilation, PadMode pad, const char* axis) {
    const std::int64_t ke = dilation * (k - 1) + 1;
    AxisGeom g;
    if (pad == PadMode::kValid) {
        if (in < ke)
            throw GeometryError(std::string("axis ") + axis + ": input extent " +
                                std::to_string(in) + " smaller than effective kernel " +
                                std::to_string(ke));
        g.out = (in - ke) / stride + 1;
    } else {
        g.out = (in + stride - 1) / stride;
        const std::int64_t total = std::max<std::int64_t>(0, (g.out - 1) * stride + ke - in);
        g.pad_lo = total / 2;
        g.pad_hi = total - g.pad_lo;
    }
    if (g.out <= 0)
        throw GeometryError(std::string("axis ") + axis + ": non-positive output extent");
    return g;
}

struct Conv3dGeom {
    std::int64_t n, cin, cout;
    std::array<std::int64_t, 3> in, k, stride, dil, out, pad_lo;
};

template <typename T>
Conv3dGeom resolve_conv3d(const Shape& input, const ConvWeightsT<T>& w) {
    w.validate();
    if (input.size() != 5)
        throw DimensionError("conv3d input must have rank 5 (n,c,d,h,w), got rank " +
                             std::to_string(input.size()));
    if (input[1] != w.in_channels())
        throw DimensionError("conv3d channel axis: input has " + std::to_string(input[1]) +
                             " channels, weights expect " + std::to_string(w.in_channels()));
    Conv3dGeom g;
    g.n = input[0];
    g.cin = w.in_channels();
    g.cout = w.out_channels();
    g.in = {input[2], input[3], input[4]};
    g.k = {w.kd(), w.kh(), w.kw()};
    g.stride = {w.stride.d, w.stride.h, w.stride.w};
    g.dil = {w.dilation.d, w.dilation.h, w.dilation.w};
    static const char* names[3] = {"depth", "height", "width"};
    for (int a = 0; a < 3; ++a) {
        const AxisGeom ag = resolve_axis(g.in[a], g.k[a], g.stride[a], g.dil[a], w.padding, names[a]);
        g.out[a] = ag.out;
        g.pad_lo[a] = ag.pad_lo;
    }
    return g;
}

namespace detail {

// Zero-padded copy of a (n,c,d,h,w) tensor; pad_hi is implied by the new extents.
template <typename T>
TensorT<T> pad5(const TensorT<T>& x, const std::array<std::int64_t, 3>& pad_lo,
                const std::array<std::int64_t, 3>& pad_hi) {
    const std::int64_t n = x.extent(0), c = x.extent(1);
    const std::int64_t d = x.extent(2), h = x.extent(3), w = x.extent(4);
    const std::int64_t dp = d + pad_lo[0] + pad_hi[0];
    const std::int64_t hp = h + pad_lo[1] + pad_hi[1];
    const std::int64_t wp = w + pad_lo[2] + pad_hi[2];
    TensorT<T> out({n, c, dp, hp, wp}, T{0});
    for (std::int64_t i = 0; i < n * c; ++i)
        for (std::int64_t z = 0; z < d; ++z)
            for (std::int64_t y = 0; y < h; ++y) {
                const T* src = x.data() + ((i * d + z) * h + y) * w;
                T* dst = out.data() +
                         ((i * dp + z + pad_lo[0]) * hp + y + pad_lo[1]) * wp + pad_lo[2];
                for (std::int64_t j = 0; j < w; ++j) dst[j] = src[j];
            }
    return out;
}

inline std::array<std::int64_t, 3> pad_hi_for(const Conv3dGeom& g) {
    std::array<std::int64_t, 3> hi;
    for (int a = 0; a < 3; ++a) {
        const std::int64_t ke = g.dil[a] * (g.k[a] - 1) + 1;
        const std::int64_t total = std::max<std::int64_t>(0, (g.out[a] - 1) * g.stride[a] + ke - g.in[a]);
        hi[a] = total - g.pad_lo[a];
    }
    return hi;
}

}  // namespace detail

// Dilated cross-correlation over all input channels plus per-channel bias
// (optimized path). Each output element is accumulated in 64-bit in a fixed
// (cin, kd, kh, kw) order with the bias added last, so results are
// independent of the worker count.
template <typename T>
TensorT<T> conv3d(const TensorT<T>& input, const ConvWeightsT<T>& w) {
    const Conv3dGeom g = resolve_conv3d(input.shape(), w);
    const TensorT<T> xp = detail::pad5(input, g.pad_lo, detail::pad_hi_for(g));
    const std::int64_t dp = xp.extent(2), hp = xp.extent(3), wp = xp.extent(4);
    const std::int64_t od = g.out[0], oh = g.out[1], ow = g.out[2];
    TensorT<T> out({g.n, g.cout, od, oh, ow});

    const T* kern = w.kernels.data();
    const std::int64_t kvol = g.k[0] * g.k[1] * g.k[2];
    const std::int64_t oblocks = (g.cout + 3) / 4;

    // Output channels run in blocks of four sharing each loaded input row, so
    // the accumulator traffic amortizes. Per-element summation order is still
    // (cin, kd, kh, kw) with the bias last, independent of the worker count.
#pragma omp parallel for collapse(2) schedule(static) num_threads(thread_count())
    for (std::int64_t n = 0; n < g.n; ++n)
        for (std::int64_t ob = 0; ob < oblocks; ++ob) {
            const std::int64_t o0 = ob * 4;
            const std::int64_t nb = std::min<std::int64_t>(4, g.cout - o0);
            std::vector<double> acc(static_cast<std::size_t>(4 * ow));
            for (std::int64_t z = 0; z < od; ++z)
                for (std::int64_t y = 0; y < oh; ++y) {
                    std::fill(acc.begin(), acc.end(), 0.0);
                    double* a0 = acc.data();
                    double* a1 = acc.data() + ow;
                    double* a2 = acc.data() + 2 * ow;
                    double* a3 = acc.data() + 3 * ow;
                    for (std::int64_t i = 0; i < g.cin; ++i) {
                        const T* xc = xp.data() + (n * g.cin + i) * dp * hp * wp;
                        const T* kc = kern + (o0 * g.cin + i) * kvol;
                        for (std::int64_t a = 0; a < g.k[0]; ++a)
                            for (std::int64_t b = 0; b < g.k[1]; ++b) {
                                const T* xrow = xc + ((z * g.stride[0] + a * g.dil[0]) * hp +
                                                      (y * g.stride[1] + b * g.dil[1])) *
                                                         wp;
                                const std::int64_t krow = (a * g.k[1] + b) * g.k[2];
                                for (std::int64_t c = 0; c < g.k[2]; ++c) {
                                    const T* xs = xrow + c * g.dil[2];
                                    if (nb == 4 && g.stride[2] == 1) {
                                        const double k0 = static_cast<double>(kc[krow + c]);
                                        const double k1 =
                                            static_cast<double>(kc[g.cin * kvol + krow + c]);
                                        const double k2 =
                                            static_cast<double>(kc[2 * g.cin * kvol + krow + c]);
                                        const double k3 =
                                            static_cast<double>(kc[3 * g.cin * kvol + krow + c]);
                                        for (std::int64_t j = 0; j < ow; ++j) {
                                            const double xv = static_cast<double>(xs[j]);
                                            a0[j] += k0 * xv;
                                            a1[j] += k1 * xv;
                                            a2[j] += k2 * xv;
                                            a3[j] += k3 * xv;
                                        }
                                    } else {
                                        for (std::int64_t q = 0; q < nb; ++q) {
                                            const double kv = static_cast<double>(
                                                kc[q * g.cin * kvol + krow + c]);
                                            double* aq = acc.data() + q * ow;
                                            if (g.stride[2] == 1) {
                                                for (std::int64_t j = 0; j < ow; ++j)
                                                    aq[j] += kv * static_cast<double>(xs[j]);
                                            } else {
                                                for (std::int64_t j = 0; j < ow; ++j)
                                                    aq[j] += kv * static_cast<double>(
                                                                      xs[j * g.stride[2]]);
                                            }
                                        }
                                    }
                                }
                            }
                    }
                    for (std::int64_t q = 0; q < nb; ++q) {
                        T* orow =
                            out.data() + (((n * g.cout + o0 + q) * od + z) * oh + y) * ow;
                        const double bias =
                            static_cast<double>(w.biases[static_cast<std::size_t>(o0 + q)]);
                        const double* aq = acc.data() + q * ow;
                        for (std::int64_t j = 0; j < ow; ++j)
                            orow[j] = static_cast<T>(aq[j] + bias);
                    }
                }
        }
    return out;
}

// Standard 2D cross-correlation plus bias. Kept as an independent code path:
// it is the per-slice oracle the planar 3D convolution is checked against.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const Kernel2DT<T>& w, PadMode padding = PadMode::kValid,
                  Dims3 stride = {1, 1, 1}, Dims3 dilation = {1, 1, 1}) {
    w.validate();
    if (input.rank() != 4)
        throw DimensionError("conv2d input must have rank 4 (n,c,h,w), got rank " +
                             std::to_string(input.rank()));
    if (input.extent(1) != w.in_channels())
        throw DimensionError("conv2d channel axis: input has " + std::to_string(input.extent(1)) +
                             " channels, weights expect " + std::to_string(w.in_channels()));
    const std::int64_t n = input.extent(0), cin = input.extent(1);
    const std::int64_t ih = input.extent(2), iw = input.extent(3);
    const AxisGeom gh = resolve_axis(ih, w.kh(), stride.h, dilation.h, padding, "height");
    const AxisGeom gw = resolve_axis(iw, w.kw(), stride.w, dilation.w, padding, "width");

    const std::int64_t hp = ih + gh.pad_lo + gh.pad_hi, wp = iw + gw.pad_lo + gw.pad_hi;
    TensorT<T> xp({n, cin, hp, wp}, T{0});
    for (std::int64_t i = 0; i < n * cin; ++i)
        for (std::int64_t y = 0; y < ih; ++y) {
            const T* src = input.data() + (i * ih + y) * iw;
            T* dst = xp.data() + (i * hp + y + gh.pad_lo) * wp + gw.pad_lo;
            for (std::int64_t j = 0; j < iw; ++j) dst[j] = src[j];
        }

    TensorT<T> out({n, w.out_channels(), gh.out, gw.out});
    const T* kern = w.kernels.data();
    const std::int64_t kvol = w.kh() * w.kw();
    std::vector<double> acc(static_cast<std::size_t>(gw.out));
    for (std::int64_t nn = 0; nn < n; ++nn)
        for (std::int64_t o = 0; o < w.out_channels(); ++o)
            for (std::int64_t y = 0; y < gh.out; ++y) {
                std::fill(acc.begin(), acc.end(), 0.0);
                for (std::int64_t i = 0; i < cin; ++i) {
                    const T* xc = xp.data() + (nn * cin + i) * hp * wp;
                    const T* kc = kern + (o * cin + i) * kvol;
                    for (std::int64_t b = 0; b < w.kh(); ++b) {
                        const T* xrow = xc + (y * stride.h + b * dilation.h) * wp;
                        const T* krow = kc + b * w.kw();
                        for (std::int64_t c = 0; c < w.kw(); ++c) {
                            const double kv = static_cast<double>(krow[c]);
                            const T* xs = xrow + c * dilation.w;
                            for (std::int64_t j = 0; j < gw.out; ++j)
                                acc[static_cast<std::size_t>(j)] +=
                                    kv * static_cast<double>(xs[j * stride.w]);
                        }
                    }
                }
                T* orow = out.data() + ((nn * w.out_channels() + o) * gh.out + y) * gw.out;
                const double bias = static_cast<double>(w.biases[static_cast<std::size_t>(o)]);
                for (std::int64_t j = 0; j < gw.out; ++j)
                    orow[j] = static_cast<T>(acc[static_cast<std::size_t>(j)] + bias);
            }
    return out;
}

namespace naive {

// Reference quintuple-loop convolution: sequential, bounds-checked against
// virtual zero padding, 64-bit accumulation. The optimized path must agree
// with this within 1e-5 relative error.
template <typename T>
TensorT<T> conv3d(const TensorT<T>& input, const ConvWeightsT<T>& w) {
    const Conv3dGeom g = resolve_conv3d(input.shape(), w);
    TensorT<T> out({g.n, g.cout, g.out[0], g.out[1], g.out[2]});
    for (std::int64_t n = 0; n < g.n; ++n)
        for (std::int64_t o = 0; o < g.cout; ++o)
            for (std::int64_t z = 0; z < g.out[0]; ++z)
                for (std::int64_t y = 0; y < g.out[1]; ++y)
                    for (std::int64_t x = 0; x < g.out[2]; ++x) {
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < g.cin; ++i)
                            for (std::int64_t a = 0; a < g.k[0]; ++a)
                                for (std::int64_t b = 0; b < g.k[1]; ++b)
                                    for (std::int64_t c = 0; c < g.k[2]; ++c) {
                                        const std::int64_t id = z * g.stride[0] + a * g.dil[0] - g.pad_lo[0];
                                        const std::int64_t ih = y * g.stride[1] + b * g.dil[1] - g.pad_lo[1];
                                        const std::int64_t iw = x * g.stride[2] + c * g.dil[2] - g.pad_lo[2];
                                        if (id < 0 || id >= g.in[0] || ih < 0 || ih >= g.in[1] ||
                                            iw < 0 || iw >= g.in[2])
                                            continue;
                                        acc += static_cast<double>(w.kernels.at5(o, i, a, b, c)) *
                                               static_cast<double>(input.at5(n, i, id, ih, iw));
                                    }
                        out.at5(n, o, z, y, x) =
                            static_cast<T>(acc + static_cast<double>(w.biases[static_cast<std::size_t>(o)]));
                    }
    return out;
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const Kernel2DT<T>& w, PadMode padding = PadMode::kValid,
                  Dims3 stride = {1, 1, 1}, Dims3 dilation = {1, 1, 1}) {
    w.validate();
    if (input.rank() != 4)
        throw DimensionError("conv2d input must have rank 4 (n,c,h,w)");
    if (input.extent(1) != w.in_channels())
        throw DimensionError("conv2d channel axis mismatch");
    const std::int64_t n = input.extent(0), cin = input.extent(1);
    const std::int64_t ih = input.extent(2), iw = input.extent(3);
    const AxisGeom gh = resolve_axis(ih, w.kh(), stride.h, dilation.h, padding, "height");
    const AxisGeom gw = resolve_axis(iw, w.kw(), stride.w, dilation.w, padding, "width");
    TensorT<T> out({n, w.out_channels(), gh.out, gw.out});
    for (std::int64_t nn = 0; nn < n; ++nn)
        for (std::int64_t o = 0; o < w.out_channels(); ++o)
            for (std::int64_t y = 0; y < gh.out; ++y)
                for (std::int64_t x = 0; x < gw.out; ++x) {
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < cin; ++i)
                        for (std::int64_t b = 0; b < w.kh(); ++b)
                            for (std::int64_t c = 0; c < w.kw(); ++c) {
                                const std::int64_t yy = y * stride.h + b * dilation.h - gh.pad_lo;
                                const std::int64_t xx = x * stride.w + c * dilation.w - gw.pad_lo;
                                if (yy < 0 || yy >= ih || xx < 0 || xx >= iw) continue;
                                acc += static_cast<double>(w.kernels.at4(o, i, b, c)) *
                                       static_cast<double>(input.at4(nn, i, yy, xx));
                            }
                    out.at4(nn, o, y, x) =
                        static_cast<T>(acc + static_cast<double>(w.biases[static_cast<std::size_t>(o)]));
                }
    return out;
}

}  // namespace naive

// --- convolution backward kernels ------------------------------------------

template <typename T>
std::vector<T> conv3d_backward_bias(const TensorT<T>& grad_out) {
    const std::int64_t n = grad_out.extent(0), c = grad_out.extent(1);
    const std::int64_t vol = grad_out.extent(2) * grad_out.extent(3) * grad_out.extent(4);
    std::vector<T> db(static_cast<std::size_t>(c), T{0});
    for (std::int64_t o = 0; o < c; ++o) {
        double acc = 0.0;
        for (std::int64_t nn = 0; nn < n; ++nn) {
            const T* p = grad_out.data() + (nn * c + o) * vol;
            for (std::int64_t j = 0; j < vol; ++j) acc += static_cast<double>(p[j]);
        }
        db[static_cast<std::size_t>(o)] = static_cast<T>(acc);
    }
    return db;
}

template <typename T>
TensorT<T> conv3d_backward_kernel(const TensorT<T>& input, const TensorT<T>& grad_out,
                                  const ConvWeightsT<T>& w) {
    const Conv3dGeom g = resolve_conv3d(input.shape(), w);
    const TensorT<T> xp = detail::pad5(input, g.pad_lo, detail::pad_hi_for(g));
    const std::int64_t dp = xp.extent(2), hp = xp.extent(3), wp = xp.extent(4);
    const std::int64_t od = g.out[0], oh = g.out[1], ow = g.out[2];
    TensorT<T> dk(w.kernels.shape());

#pragma omp parallel for collapse(2) schedule(static) num_threads(thread_count())
    for (std::int64_t o = 0; o < g.cout; ++o)
        for (std::int64_t i = 0; i < g.cin; ++i)
            for (std::int64_t a = 0; a < g.k[0]; ++a)
                for (std::int64_t b = 0; b < g.k[1]; ++b)
                    for (std::int64_t c = 0; c < g.k[2]; ++c) {
                        // four lanes break the accumulator dependency chain;
                        // the summation order is fixed, so results stay
                        // deterministic
                        double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
                        for (std::int64_t n = 0; n < g.n; ++n) {
                            const T* xc = xp.data() + (n * g.cin + i) * dp * hp * wp;
                            const T* gc = grad_out.data() + (n * g.cout + o) * od * oh * ow;
                            for (std::int64_t z = 0; z < od; ++z)
                                for (std::int64_t y = 0; y < oh; ++y) {
                                    const T* xrow = xc + ((z * g.stride[0] + a * g.dil[0]) * hp +
                                                          (y * g.stride[1] + b * g.dil[1])) *
                                                             wp +
                                                    c * g.dil[2];
                                    const T* grow = gc + (z * oh + y) * ow;
                                    if (g.stride[2] == 1) {
                                        std::int64_t j = 0;
                                        for (; j + 4 <= ow; j += 4) {
                                            acc0 += static_cast<double>(grow[j]) *
                                                    static_cast<double>(xrow[j]);
                                            acc1 += static_cast<double>(grow[j + 1]) *
                                                    static_cast<double>(xrow[j + 1]);
                                            acc2 += static_cast<double>(grow[j + 2]) *
                                                    static_cast<double>(xrow[j + 2]);
                                            acc3 += static_cast<double>(grow[j + 3]) *
                                                    static_cast<double>(xrow[j + 3]);
                                        }
                                        for (; j < ow; ++j)
                                            acc0 += static_cast<double>(grow[j]) *
                                                    static_cast<double>(xrow[j]);
                                    } else {
                                        for (std::int64_t j = 0; j < ow; ++j)
                                            acc0 += static_cast<double>(grow[j]) *
                                                    static_cast<double>(xrow[j * g.stride[2]]);
                                    }
                                }
                        }
                        dk.at5(o, i, a, b, c) = static_cast<T>(acc0 + acc1 + acc2 + acc3);
                    }
    return dk;
}

template <typename T>
TensorT<T> conv3d_backward_input(const TensorT<T>& grad_out, const TensorT<T>& input_like,
                                 const ConvWeightsT<T>& w) {
    const Conv3dGeom g = resolve_conv3d(input_like.shape(), w);
    const auto pad_hi = detail::pad_hi_for(g);
    const std::int64_t dp = g.in[0] + g.pad_lo[0] + pad_hi[0];
    const std::int64_t hp = g.in[1] + g.pad_lo[1] + pad_hi[1];
    const std::int64_t wp = g.in[2] + g.pad_lo[2] + pad_hi[2];
    const std::int64_t od = g.out[0], oh = g.out[1], ow = g.out[2];
    const std::int64_t kvol = g.k[0] * g.k[1] * g.k[2];
    TensorT<T> dx(input_like.shape());

    // Scatter into a padded 64-bit slab per (n, cin); each slab is private to
    // one loop iteration, so the parallel partition stays deterministic.
#pragma omp parallel for collapse(2) schedule(static) num_threads(thread_count())
    for (std::int64_t n = 0; n < g.n; ++n)
        for (std::int64_t i = 0; i < g.cin; ++i) {
            std::vector<double> slab(static_cast<std::size_t>(dp * hp * wp), 0.0);
            for (std::int64_t o = 0; o < g.cout; ++o) {
                const T* gc = grad_out.data() + (n * g.cout + o) * od * oh * ow;
                const T* kc = w.kernels.data() + (o * g.cin + i) * kvol;
                for (std::int64_t a = 0; a < g.k[0]; ++a)
                    for (std::int64_t b = 0; b < g.k[1]; ++b)
                        for (std::int64_t c = 0; c < g.k[2]; ++c) {
                            const double kv = static_cast<double>(kc[(a * g.k[1] + b) * g.k[2] + c]);
                            if (kv == 0.0) continue;
                            for (std::int64_t z = 0; z < od; ++z)
                                for (std::int64_t y = 0; y < oh; ++y) {
                                    double* srow = slab.data() +
                                                   ((z * g.stride[0] + a * g.dil[0]) * hp +
                                                    (y * g.stride[1] + b * g.dil[1])) *
                                                       wp +
                                                   c * g.dil[2];
                                    const T* grow = gc + (z * oh + y) * ow;
                                    if (g.stride[2] == 1) {
                                        for (std::int64_t j = 0; j < ow; ++j)
                                            srow[j] += kv * static_cast<double>(grow[j]);
                                    } else {
                                        for (std::int64_t j = 0; j < ow; ++j)
                                            srow[j * g.stride[2]] += kv * static_cast<double>(grow[j]);
                                    }
                                }
                        }
            }
            // crop the padding away
            T* dst = dx.data() + (n * g.cin + i) * g.in[0] * g.in[1] * g.in[2];
            for (std::int64_t z = 0; z < g.in[0]; ++z)
                for (std::int64_t y = 0; y < g.in[1]; ++y) {
                    const double* srow = slab.data() +
                                         ((z + g.pad_lo[0]) * hp + y + g.pad_lo[1]) * wp +
                                         g.pad_lo[2];
                    T* drow = dst + (z * g.in[1] + y) * g.in[2];
                    for (std::int64_t j = 0; j < g.in[2]; ++j)
                        drow[j] = static_cast<T>(srow[j]);
                }
        }
    return dx;
}

// 2D backward kernels mirror the 3D ones; they only appear in small oracle
// graphs, so plain loops are enough.
template <typename T>
std::vector<T> conv2d_backward_bias(const TensorT<T>& grad_out) {
    const std::int64_t n = grad_out.extent(0), c = grad_out.extent(1);
    const std::int64_t vol = grad_out.extent(2) * grad_out.extent(3);
    std::vector<T> db(static_cast<std::size_t>(c), T{0});
    for (std::int64_t o = 0; o < c; ++o) {
        double acc = 0.0;
        for (std::int64_t nn = 0; nn < n; ++nn) {
            const T* p = grad_out.data() + (nn * c + o) * vol;
            for (std::int64_t j = 0; j < vol; ++j) acc += static_cast<double>(p[j]);
        }
        db[static_cast<std::size_t>(o)] = static_cast<T>(acc);
    }
    return db;
}

template <typename T>
TensorT<T> conv2d_backward_kernel(const TensorT<T>& input, const TensorT<T>& grad_out,
                                  const Kernel2DT<T>& w, PadMode padding, Dims3 stride,
                                  Dims3 dilation) {
    const std::int64_t n = input.extent(0), cin = input.extent(1);
    const std::int64_t ih = input.extent(2), iw = input.extent(3);
    const AxisGeom gh = resolve_axis(ih, w.kh(), stride.h, dilation.h, padding, "height");
    const AxisGeom gw = resolve_axis(iw, w.kw(), stride.w, dilation.w, padding, "width");
    TensorT<T> dk(w.kernels.shape());
    for (std::int64_t o = 0; o < w.out_channels(); ++o)
        for (std::int64_t i = 0; i < cin; ++i)
            for (std::int64_t b = 0; b < w.kh(); ++b)
                for (std::int64_t c = 0; c < w.kw(); ++c) {
                    double acc = 0.0;
                    for (std::int64_t nn = 0; nn < n; ++nn)
                        for (std::int64_t y = 0; y < gh.out; ++y)
                            for (std::int64_t x = 0; x < gw.out; ++x) {
                                const std::int64_t yy = y * stride.h + b * dilation.h - gh.pad_lo;
                                const std::int64_t xx = x * stride.w + c * dilation.w - gw.pad_lo;
                                if (yy < 0 || yy >= ih || xx < 0 || xx >= iw) continue;
                                acc += static_cast<double>(grad_out.at4(nn, o, y, x)) *
                                       static_cast<double>(input.at4(nn, i, yy, xx));
                            }
                    dk.at4(o, i, b, c) = static_cast<T>(acc);
                }
    return dk;
}

template <typename T>
TensorT<T> conv2d_backward_input(const TensorT<T>& grad_out, const TensorT<T>& input_like,
                                 const Kernel2DT<T>& w, PadMode padding, Dims3 stride,
                                 Dims3 dilation) {
    const std::int64_t n = input_like.extent(0), cin = input_like.extent(1);
    const std::int64_t ih = input_like.extent(2), iw = input_like.extent(3);
    const AxisGeom gh = resolve_axis(ih, w.kh(), stride.h, dilation.h, padding, "height");
    const AxisGeom gw = resolve_axis(iw, w.kw(), stride.w, dilation.w, padding, "width");
    TensorT<double> acc(input_like.shape(), 0.0);
    for (std::int64_t nn = 0; nn < n; ++nn)
        for (std::int64_t o = 0; o < w.out_channels(); ++o)
            for (std::int64_t i = 0; i < cin; ++i)
                for (std::int64_t y = 0; y < gh.out; ++y)
                    for (std::int64_t x = 0; x < gw.out; ++x) {
                        const double gv = static_cast<double>(grad_out.at4(nn, o, y, x));
                        for (std::int64_t b = 0; b < w.kh(); ++b)
                            for (std::int64_t c = 0; c < w.kw(); ++c) {
                                const std::int64_t yy = y * stride.h + b * dilation.h - gh.pad_lo;
                                const std::int64_t xx = x * stride.w + c * dilation.w - gw.pad_lo;
                                if (yy < 0 || yy >= ih || xx < 0 || xx >= iw) continue;
                                acc.at4(nn, i, yy, xx) +=
                                    gv * static_cast<double>(w.kernels.at4(o, i, b, c));
                            }
                    }
    return acc.template cast<T>();
}

// --- transposed convolution --------------------------------------------------

struct TconvGeom {
    std::int64_t n, cin, cout;
    std::array<std::int64_t, 3> in, k, up, dil, out, pad_lo;
};

// Output extents are the input extents times the upsample factors; the linear
// part is the adjoint of a SAME conv3d with stride = upsample over the output
// grid. Bias is added per output channel of this operation.
template <typename T>
TconvGeom resolve_transpose_conv3d(const Shape& input, const ConvWeightsT<T>& w, Dims3 upsample) {
    w.validate();
    if (input.size() != 5)
        throw DimensionError("transpose_conv3d input must have rank 5 (n,c,d,h,w)");
    if (input[1] != w.in_channels())
        throw DimensionError("transpose_conv3d channel axis: input has " + std::to_string(input[1]) +
                             " channels, weights expect " + std::to_string(w.in_channels()));
    if (upsample.d <= 0 || upsample.h <= 0 || upsample.w <= 0)
        throw GeometryError("upsample factors must be positive");
    TconvGeom g;
    g.n = input[0];
    g.cin = w.in_channels();
    g.cout = w.out_channels();
    g.in = {input[2], input[3], input[4]};
    g.k = {w.kd(), w.kh(), w.kw()};
    g.up = {upsample.d, upsample.h, upsample.w};
    g.dil = {w.dilation.d, w.dilation.h, w.dilation.w};
    for (int a = 0; a < 3; ++a) {
        const std::int64_t ke = g.dil[a] * (g.k[a] - 1) + 1;
        if (w.padding == PadMode::kSame) {
            g.out[a] = g.in[a] * g.up[a];
            const std::int64_t total =
                std::max<std::int64_t>(0, (g.in[a] - 1) * g.up[a] + ke - g.out[a]);
            g.pad_lo[a] = total / 2;
        } else {
            g.out[a] = (g.in[a] - 1) * g.up[a] + ke;
            g.pad_lo[a] = 0;
        }
        if (g.out[a] <= 0) throw GeometryError("transpose_conv3d: non-positive output extent");
    }
    return g;
}

template <typename T>
TensorT<T> transpose_conv3d(const TensorT<T>& input, const ConvWeightsT<T>& w, Dims3 upsample) {
    const TconvGeom g = resolve_transpose_conv3d(input.shape(), w, upsample);
    const std::int64_t od = g.out[0], oh = g.out[1], ow = g.out[2];
    const std::int64_t id = g.in[0], ih = g.in[1], iw = g.in[2];
    const std::int64_t kvol = g.k[0] * g.k[1] * g.k[2];
    TensorT<T> out({g.n, g.cout, od, oh, ow});

#pragma omp parallel for collapse(2) schedule(static) num_threads(thread_count())
    for (std::int64_t n = 0; n < g.n; ++n)
        for (std::int64_t o = 0; o < g.cout; ++o) {
            std::vector<double> slab(static_cast<std::size_t>(od * oh * ow), 0.0);
            for (std::int64_t i = 0; i < g.cin; ++i) {
                const T* xc = input.data() + (n * g.cin + i) * id * ih * iw;
                const T* kc = w.kernels.data() + (o * g.cin + i) * kvol;
                for (std::int64_t a = 0; a < g.k[0]; ++a)
                    for (std::int64_t b = 0; b < g.k[1]; ++b)
                        for (std::int64_t c = 0; c < g.k[2]; ++c) {
                            const double kv = static_cast<double>(kc[(a * g.k[1] + b) * g.k[2] + c]);
                            for (std::int64_t z = 0; z < id; ++z) {
                                const std::int64_t tz = z * g.up[0] + a * g.dil[0] - g.pad_lo[0];
                                if (tz < 0 || tz >= od) continue;
                                for (std::int64_t y = 0; y < ih; ++y) {
                                    const std::int64_t ty = y * g.up[1] + b * g.dil[1] - g.pad_lo[1];
                                    if (ty < 0 || ty >= oh) continue;
                                    const T* xrow = xc + (z * ih + y) * iw;
                                    double* srow = slab.data() + (tz * oh + ty) * ow;
                                    for (std::int64_t x = 0; x < iw; ++x) {
                                        const std::int64_t tx =
                                            x * g.up[2] + c * g.dil[2] - g.pad_lo[2];
                                        if (tx < 0 || tx >= ow) continue;
                                        srow[tx] += kv * static_cast<double>(xrow[x]);
                                    }
                                }
                            }
                        }
            }
            const double bias = static_cast<double>(w.biases[static_cast<std::size_t>(o)]);
            T* dst = out.data() + (n * g.cout + o) * od * oh * ow;
            for (std::int64_t j = 0; j < od * oh * ow; ++j)
                dst[j] = static_cast<T>(slab[static_cast<std::size_t>(j)] + bias);
        }
    return out;
}

template <typename T>
TensorT<T> transpose_conv3d_backward_input(const TensorT<T>& grad_out, const TensorT<T>& input_like,
                                           const ConvWeightsT<T>& w, Dims3 upsample) {
    const TconvGeom g = resolve_transpose_conv3d(input_like.shape(), w, upsample);
    const std::int64_t od = g.out[0], oh = g.out[1], ow = g.out[2];
    const std::int64_t id = g.in[0], ih = g.in[1], iw = g.in[2];
    const std::int64_t kvol = g.k[0] * g.k[1] * g.k[2];
    TensorT<T> dx(input_like.shape());

#pragma omp parallel for collapse(2) schedule(static) num_threads(thread_count())
    for (std::int64_t n = 0; n < g.n; ++n)
        for (std::int64_t i = 0; i < g.cin; ++i)
            for (std::int64_t z = 0; z < id; ++z)
                for (std::int64_t y = 0; y < ih; ++y)
                    for (std::int64_t x = 0; x < iw; ++x) {
                        double acc = 0.0;
                        for (std::int64_t o = 0; o < g.cout; ++o) {
                            const T* gc = grad_out.data() + (n * g.cout + o) * od * oh * ow;
                            const T* kc = w.kernels.data() + (o * g.cin + i) * kvol;
                            for (std::int64_t a = 0; a < g.k[0]; ++a) {
                                const std::int64_t tz = z * g.up[0] + a * g.dil[0] - g.pad_lo[0];
                                if (tz < 0 || tz >= od) continue;
                                for (std::int64_t b = 0; b < g.k[1]; ++b) {
                                    const std::int64_t ty = y * g.up[1] + b * g.dil[1] - g.pad_lo[1];
                                    if (ty < 0 || ty >= oh) continue;
                                    for (std::int64_t c = 0; c < g.k[2]; ++c) {
                                        const std::int64_t tx =
                                            x * g.up[2] + c * g.dil[2] - g.pad_lo[2];
                                        if (tx < 0 || tx >= ow) continue;
                                        acc += static_cast<double>(kc[(a * g.k[1] + b) * g.k[2] + c]) *
                                               static_cast<double>(gc[(tz * oh + ty) * ow + tx]);
                                    }
                                }
                            }
                        }
                        dx.at5(n, i, z, y, x) = static_cast<T>(acc);
                    }
    return dx;
}

template <typename T>
TensorT<T> transpose_conv3d_backward_kernel(const TensorT<T>& input, const TensorT<T>& grad_out,
                                            const ConvWeightsT<T>& w, Dims3 upsample) {
    const TconvGeom g = resolve_transpose_conv3d(input.shape(), w, upsample);
    const std::int64_t od = g.out[0], oh = g.out[1], ow = g.out[2];
    const std::int64_t id = g.in[0], ih = g.in[1], iw = g.in[2];
    TensorT<T> dk(w.kernels.shape());

#pragma omp parallel for collapse(2) schedule(static) num_threads(thread_count())
    for (std::int64_t o = 0; o < g.cout; ++o)
        for (std::int64_t i = 0; i < g.cin; ++i)
            for (std::int64_t a = 0; a < g.k[0]; ++a)
                for (std::int64_t b = 0; b < g.k[1]; ++b)
                    for (std::int64_t c = 0; c < g.k[2]; ++c) {
                        double acc = 0.0;
                        for (std::int64_t n = 0; n < g.n; ++n) {
                            const T* xc = input.data() + (n * g.cin + i) * id * ih * iw;
                            const T* gc = grad_out.data() + (n * g.cout + o) * od * oh * ow;
                            for (std::int64_t z = 0; z < id; ++z) {
                                const std::int64_t tz = z * g.up[0] + a * g.dil[0] - g.pad_lo[0];
                                if (tz < 0 || tz >= od) continue;
                                for (std::int64_t y = 0; y < ih; ++y) {
                                    const std::int64_t ty = y * g.up[1] + b * g.dil[1] - g.pad_lo[1];
                                    if (ty < 0 || ty >= oh) continue;
                                    for (std::int64_t x = 0; x < iw; ++x) {
                                        const std::int64_t tx =
                                            x * g.up[2] + c * g.dil[2] - g.pad_lo[2];
                                        if (tx < 0 || tx >= ow) continue;
                                        acc += static_cast<double>(xc[(z * ih + y) * iw + x]) *
                                               static_cast<double>(gc[(tz * oh + ty) * ow + tx]);
                                    }
                                }
                            }
                        }
                        dk.at5(o, i, a, b, c) = static_cast<T>(acc);
                    }
    return dk;
}

// --- pooling -----------------------------------------------------------------

// Max pooling over non-overlapping-compatible windows; (extent - window) must
// divide by the stride so no partial windows occur.
template <typename T>
TensorT<T> maxpool3d(const TensorT<T>& input, Dims3 window, Dims3 stride,
                     TensorT<std::int64_t>* argmax = nullptr) {
    if (input.rank() != 5)
        throw DimensionError("maxpool3d input must have rank 5 (n,c,d,h,w)");
    const std::int64_t n = input.extent(0), c = input.extent(1);
    const std::array<std::int64_t, 3> in = {input.extent(2), input.extent(3), input.extent(4)};
    const std::array<std::int64_t, 3> wnd = {window.d, window.h, window.w};
    const std::array<std::int64_t, 3> str = {stride.d, stride.h, stride.w};
    std::array<std::int64_t, 3> out;
    static const char* names[3] = {"depth", "height", "width"};
    for (int a = 0; a < 3; ++a) {
        if (wnd[a] <= 0 || str[a] <= 0) throw GeometryError("maxpool3d: non-positive window/stride");
        if (in[a] < wnd[a] || (in[a] - wnd[a]) % str[a] != 0)
            throw GeometryError(std::string("maxpool3d axis ") + names[a] + ": extent " +
                                std::to_string(in[a]) + " not divisible by window " +
                                std::to_string(wnd[a]) + " stride " + std::to_string(str[a]));
        out[a] = (in[a] - wnd[a]) / str[a] + 1;
    }
    TensorT<T> result({n, c, out[0], out[1], out[2]});
    if (argmax) *argmax = TensorT<std::int64_t>({n, c, out[0], out[1], out[2]});

#pragma omp parallel for collapse(2) schedule(static) num_threads(thread_count())
    for (std::int64_t nn = 0; nn < n; ++nn)
        for (std::int64_t cc = 0; cc < c; ++cc) {
            const T* xc = input.data() + (nn * c + cc) * in[0] * in[1] * in[2];
            for (std::int64_t z = 0; z < out[0]; ++z)
                for (std::int64_t y = 0; y < out[1]; ++y)
                    for (std::int64_t x = 0; x < out[2]; ++x) {
                        T best = -std::numeric_limits<T>::infinity();
                        std::int64_t best_idx = -1;
                        for (std::int64_t a = 0; a < wnd[0]; ++a)
                            for (std::int64_t b = 0; b < wnd[1]; ++b)
                                for (std::int64_t d = 0; d < wnd[2]; ++d) {
                                    const std::int64_t idx =
                                        ((z * str[0] + a) * in[1] + y * str[1] + b) * in[2] +
                                        x * str[2] + d;
                                    // first occurrence wins on ties
                                    if (xc[idx] > best) {
                                        best = xc[idx];
                                        best_idx = idx;
                                    }
                                }
                        result.at5(nn, cc, z, y, x) = best;
                        if (argmax) argmax->at5(nn, cc, z, y, x) = best_idx;
                    }
        }
    return result;
}

template <typename T>
TensorT<T> maxpool3d_backward(const TensorT<T>& grad_out, const TensorT<std::int64_t>& argmax,
                              const Shape& input_shape) {
    TensorT<T> dx(input_shape, T{0});
    const std::int64_t n = grad_out.extent(0), c = grad_out.extent(1);
    const std::int64_t ovol = grad_out.extent(2) * grad_out.extent(3) * grad_out.extent(4);
    const std::int64_t ivol = input_shape[2] * input_shape[3] * input_shape[4];
#pragma omp parallel for collapse(2) schedule(static) num_threads(thread_count())
    for (std::int64_t nn = 0; nn < n; ++nn)
        for (std::int64_t cc = 0; cc < c; ++cc) {
            const T* g = grad_out.data() + (nn * c + cc) * ovol;
            const std::int64_t* am = argmax.data() + (nn * c + cc) * ovol;
            T* d = dx.data() + (nn * c + cc) * ivol;
            for (std::int64_t j = 0; j < ovol; ++j) d[am[j]] += g[j];
        }
    return dx;
}

// --- activations ---------------------------------------------------------------

template <typename T>
T sigmoid_scalar(T x) {
    // evaluated stably on both tails; output clamped into the open interval
    // (0,1): the smallest representable positive value and the largest value
    // below one, so downstream log() calls stay finite. NaN propagates so a
    // poisoned graph cannot masquerade as a valid probability.
    double s;
    const double xd = static_cast<double>(x);
    if (std::isnan(xd)) return x;
    if (xd >= 0.0) {
        s = 1.0 / (1.0 + std::exp(-xd));
    } else {
        const double e = std::exp(xd);
        s = e / (1.0 + e);
    }
    const double lo = static_cast<double>(std::numeric_limits<T>::min());
    const double hi = 1.0 - static_cast<double>(std::numeric_limits<T>::epsilon()) / 2.0;
    return static_cast<T>(std::min(hi, std::max(lo, s)));
}

template <typename T>
TensorT<T> activation(const TensorT<T>& input, Activation kind) {
    TensorT<T> out(input.shape());
    const std::int64_t n = input.numel();
    if (kind == Activation::kRelu) {
        for (std::int64_t i = 0; i < n; ++i) out[i] = input[i] > T{0} ? input[i] : T{0};
    } else {
        for (std::int64_t i = 0; i < n; ++i) out[i] = sigmoid_scalar(input[i]);
    }
    return out;
}

template <typename T>
TensorT<T> activation_backward(const TensorT<T>& grad_out, const TensorT<T>& input,
                               const TensorT<T>& output, Activation kind) {
    TensorT<T> dx(input.shape());
    const std::int64_t n = input.numel();
    if (kind == Activation::kRelu) {
        for (std::int64_t i = 0; i < n; ++i) dx[i] = input[i] > T{0} ? grad_out[i] : T{0};
    } else {
        for (std::int64_t i = 0; i < n; ++i) dx[i] = grad_out[i] * output[i] * (T{1} - output[i]);
    }
    return dx;
}

// --- channel concatenation / slicing -------------------------------------------

template <typename T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 5 || b.rank() != 5)
        throw DimensionError("concat_channels expects rank-5 tensors");
    for (int axis : {0, 2, 3, 4})
        if (a.extent(axis) != b.extent(axis))
            throw DimensionError("concat_channels extent mismatch on axis " + std::to_string(axis) +
                                 ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::int64_t n = a.extent(0), ca = a.extent(1), cb = b.extent(1);
    const std::int64_t vol = a.extent(2) * a.extent(3) * a.extent(4);
    TensorT<T> out({n, ca + cb, a.extent(2), a.extent(3), a.extent(4)});
    for (std::int64_t nn = 0; nn < n; ++nn) {
        std::copy(a.data() + nn * ca * vol, a.data() + (nn + 1) * ca * vol,
                  out.data() + nn * (ca + cb) * vol);
        std::copy(b.data() + nn * cb * vol, b.data() + (nn + 1) * cb * vol,
                  out.data() + (nn * (ca + cb) + ca) * vol);
    }
    return out;
}

template <typename T>
TensorT<T> slice_channels(const TensorT<T>& t, std::int64_t from, std::int64_t to) {
    if (t.rank() != 5) throw DimensionError("slice_channels expects a rank-5 tensor");
    if (from < 0 || to > t.extent(1) || from >= to)
        throw DimensionError("slice_channels range [" + std::to_string(from) + "," +
                             std::to_string(to) + ") out of bounds for " + shape_str(t.shape()));
    const std::int64_t n = t.extent(0), c = t.extent(1), cs = to - from;
    const std::int64_t vol = t.extent(2) * t.extent(3) * t.extent(4);
    TensorT<T> out({n, cs, t.extent(2), t.extent(3), t.extent(4)});
    for (std::int64_t nn = 0; nn < n; ++nn)
        std::copy(t.data() + (nn * c + from) * vol, t.data() + (nn * c + to) * vol,
                  out.data() + nn * cs * vol);
    return out;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b))
        throw DimensionError("add shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    TensorT<T> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

}  // namespace p3d
