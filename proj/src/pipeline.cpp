#include "p3d/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "p3d/error.hpp"
#include "p3d/io_util.hpp"

namespace p3d {

void Volume::validate() const {
    if (extents[0] <= 0 || extents[1] <= 0 || extents[2] <= 0)
        throw DimensionError("volume extents must be positive");
    if (static_cast<std::int64_t>(data.size()) != numel())
        throw DimensionError("volume data length does not match extents");
    for (float v : data)
        if (!std::isfinite(v)) throw ContractError("volume holds non-finite values");
}

void MaskVolume::validate() const {
    if (extents[0] <= 0 || extents[1] <= 0 || extents[2] <= 0)
        throw DimensionError("mask extents must be positive");
    if (static_cast<std::int64_t>(data.size()) != numel())
        throw DimensionError("mask data length does not match extents");
    for (std::uint8_t v : data)
        if (v > 1) throw ContractError("mask values must be strictly binary");
}

std::int64_t MaskVolume::positive_count() const {
    std::int64_t n = 0;
    for (std::uint8_t v : data) n += v;
    return n;
}

namespace {

// Interpolating quadratic B-spline along one axis. Coefficients solve the
// tridiagonal system (1/8, 3/4, 1/8) c = x; the boundary rows use linear
// extrapolation (c[-1] = 2c[0] - c[1]), which collapses them to c0 = x0 and
// c[N-1] = x[N-1] and keeps constants and affine ramps exact.
class SplineAxis {
public:
    explicit SplineAxis(std::int64_t n_in, std::int64_t n_out) : n_in_(n_in) {
        targets_.resize(static_cast<std::size_t>(n_out));
        const double scale =
            (n_out > 1 && n_in > 1) ? static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1)
                                    : 0.0;
        for (std::int64_t i = 0; i < n_out; ++i) {
            const double x = n_out > 1 ? static_cast<double>(i) * scale
                                       : static_cast<double>(n_in - 1) / 2.0;
            Target& t = targets_[static_cast<std::size_t>(i)];
            t.base = static_cast<std::int64_t>(std::floor(x + 0.5));
            const double f = x - static_cast<double>(t.base);
            t.w[0] = 0.5 * (0.5 - f) * (0.5 - f);
            t.w[1] = 0.75 - f * f;
            t.w[2] = 0.5 * (0.5 + f) * (0.5 + f);
        }
    }

    // line -> coefficients, in place. Thomas algorithm with each row
    // normalized to unit diagonal; rows 0 and n-1 are identities.
    void prefilter(std::vector<double>& line) const {
        const std::int64_t n = n_in_;
        if (n <= 2) return;  // boundary rows make c = x
        std::vector<double>& c = line;
        scratch_.assign(static_cast<std::size_t>(n), 0.0);
        std::vector<double>& up = scratch_;
        for (std::int64_t i = 1; i <= n - 2; ++i) {
            const double denom = 0.75 - 0.125 * up[static_cast<std::size_t>(i - 1)];
            up[static_cast<std::size_t>(i)] = 0.125 / denom;
            c[static_cast<std::size_t>(i)] =
                (c[static_cast<std::size_t>(i)] - 0.125 * c[static_cast<std::size_t>(i - 1)]) /
                denom;
        }
        for (std::int64_t i = n - 2; i >= 1; --i)
            c[static_cast<std::size_t>(i)] -=
                up[static_cast<std::size_t>(i)] * c[static_cast<std::size_t>(i + 1)];
    }

    void evaluate(const std::vector<double>& coeff, std::vector<double>& out) const {
        out.resize(targets_.size());
        for (std::size_t i = 0; i < targets_.size(); ++i) {
            const Target& t = targets_[i];
            out[i] = t.w[0] * coeff_at(coeff, t.base - 1) + t.w[1] * coeff_at(coeff, t.base) +
                     t.w[2] * coeff_at(coeff, t.base + 1);
        }
    }

private:
    struct Target {
        std::int64_t base;
        double w[3];
    };

    double coeff_at(const std::vector<double>& c, std::int64_t k) const {
        if (n_in_ == 1) return c[0];
        if (k < 0) return 2.0 * c[0] - c[1];
        if (k >= n_in_)
            return 2.0 * c[static_cast<std::size_t>(n_in_ - 1)] -
                   c[static_cast<std::size_t>(n_in_ - 2)];
        return c[static_cast<std::size_t>(k)];
    }

    std::int64_t n_in_;
    std::vector<Target> targets_;
    mutable std::vector<double> scratch_;
};

// Resample one axis of a (D,H,W) double grid.
std::vector<double> resample_axis(const std::vector<double>& src,
                                  std::array<std::int64_t, 3> ext, int axis,
                                  std::int64_t target) {
    const std::int64_t n_in = ext[static_cast<std::size_t>(axis)];
    std::array<std::int64_t, 3> out_ext = ext;
    out_ext[static_cast<std::size_t>(axis)] = target;
    std::vector<double> dst(static_cast<std::size_t>(out_ext[0] * out_ext[1] * out_ext[2]));

    const SplineAxis spline(n_in, target);
    // iterate all lines along `axis`
    std::array<std::int64_t, 3> other{};
    int oa = 0;
    for (int a = 0; a < 3; ++a)
        if (a != axis) other[static_cast<std::size_t>(oa++)] = a;
    const std::int64_t n0 = ext[static_cast<std::size_t>(other[0])];
    const std::int64_t n1 = ext[static_cast<std::size_t>(other[1])];

    const auto index = [](const std::array<std::int64_t, 3>& e, std::int64_t d, std::int64_t h,
                          std::int64_t w) { return (d * e[1] + h) * e[2] + w; };

    std::vector<double> line(static_cast<std::size_t>(n_in));
    std::vector<double> out_line;
    for (std::int64_t i0 = 0; i0 < n0; ++i0)
        for (std::int64_t i1 = 0; i1 < n1; ++i1) {
            std::array<std::int64_t, 3> at{};
            at[static_cast<std::size_t>(other[0])] = i0;
            at[static_cast<std::size_t>(other[1])] = i1;
            for (std::int64_t j = 0; j < n_in; ++j) {
                at[static_cast<std::size_t>(axis)] = j;
                line[static_cast<std::size_t>(j)] =
                    src[static_cast<std::size_t>(index(ext, at[0], at[1], at[2]))];
            }
            spline.prefilter(line);
            spline.evaluate(line, out_line);
            for (std::int64_t j = 0; j < target; ++j) {
                at[static_cast<std::size_t>(axis)] = j;
                dst[static_cast<std::size_t>(index(out_ext, at[0], at[1], at[2]))] =
                    out_line[static_cast<std::size_t>(j)];
            }
        }
    return dst;
}

}  // namespace

Volume resample(const Volume& v, std::array<std::int64_t, 3> target) {
    v.validate();
    if (target[0] <= 0 || target[1] <= 0 || target[2] <= 0)
        throw GeometryError("resample target extents must be positive");

    std::vector<double> grid(v.data.begin(), v.data.end());
    std::array<std::int64_t, 3> ext = v.extents;
    for (int axis = 0; axis < 3; ++axis) {
        if (ext[static_cast<std::size_t>(axis)] == target[static_cast<std::size_t>(axis)]) continue;
        grid = resample_axis(grid, ext, axis, target[static_cast<std::size_t>(axis)]);
        ext[static_cast<std::size_t>(axis)] = target[static_cast<std::size_t>(axis)];
    }

    Volume out(target[0], target[1], target[2]);
    out.provenance = v.provenance;
    for (std::size_t i = 0; i < grid.size(); ++i) out.data[i] = static_cast<float>(grid[i]);
    return out;
}

Volume normalize_scan(const Volume& v) {
    v.validate();
    const auto [mn_it, mx_it] = std::minmax_element(v.data.begin(), v.data.end());
    const double mn = *mn_it, mx = *mx_it;
    if (mn == mx)
        throw DegenerateRangeError("normalize_scan: constant volume (value " + std::to_string(mn) +
                                   ") has no range to map onto [-1,1]");
    Volume out = v;
    const double scale = 2.0 / (mx - mn);
    for (float& x : out.data) x = static_cast<float>((static_cast<double>(x) - mn) * scale - 1.0);
    return out;
}

Volume permute_axes(const Volume& v, std::array<int, 3> order) {
    v.validate();
    std::array<bool, 3> seen{false, false, false};
    for (int a : order) {
        if (a < 0 || a > 2 || seen[static_cast<std::size_t>(a)])
            throw ContractError("permute_axes: order must be a permutation of 0,1,2");
        seen[static_cast<std::size_t>(a)] = true;
    }
    Volume out(v.extents[static_cast<std::size_t>(order[0])],
               v.extents[static_cast<std::size_t>(order[1])],
               v.extents[static_cast<std::size_t>(order[2])]);
    out.provenance = v.provenance;
    std::array<std::int64_t, 3> src{};
    for (std::int64_t d = 0; d < out.extents[0]; ++d)
        for (std::int64_t h = 0; h < out.extents[1]; ++h)
            for (std::int64_t w = 0; w < out.extents[2]; ++w) {
                src[static_cast<std::size_t>(order[0])] = d;
                src[static_cast<std::size_t>(order[1])] = h;
                src[static_cast<std::size_t>(order[2])] = w;
                out.at(d, h, w) = v.at(src[0], src[1], src[2]);
            }
    return out;
}

Tensor replicate_channels(const Tensor& slab) {
    if (slab.rank() != 5)
        throw ContractError("replicate_channels expects a rank-5 (n,1,d,h,w) tensor");
    if (slab.extent(1) != 1)
        throw ContractError("replicate_channels expects exactly 1 input channel, got " +
                            std::to_string(slab.extent(1)));
    const std::int64_t n = slab.extent(0);
    const std::int64_t vol = slab.extent(2) * slab.extent(3) * slab.extent(4);
    Tensor out({n, 3, slab.extent(2), slab.extent(3), slab.extent(4)});
    for (std::int64_t nn = 0; nn < n; ++nn)
        for (std::int64_t c = 0; c < 3; ++c)
            std::copy(slab.data() + nn * vol, slab.data() + (nn + 1) * vol,
                      out.data() + (nn * 3 + c) * vol);
    return out;
}

WindowSet decompose(const Volume& v, std::int64_t window_depth, std::int64_t stride) {
    v.validate();
    const std::int64_t d = v.extents[0];
    if (window_depth <= 0 || stride <= 0 || stride > window_depth)
        throw GeometryError("decompose: need 0 < stride <= window_depth");
    if (d < window_depth)
        throw GeometryError("decompose: volume depth " + std::to_string(d) +
                            " is smaller than the window depth " + std::to_string(window_depth) +
                            "; resample the volume first");
    if ((d - window_depth) % stride != 0)
        throw GeometryError("decompose: (depth - window) = " + std::to_string(d - window_depth) +
                            " is not divisible by stride " + std::to_string(stride) +
                            "; resample the volume to a compatible depth first");

    WindowSet ws;
    ws.window_depth = window_depth;
    ws.stride = stride;
    ws.source = v.extents;
    const std::int64_t n = (d - window_depth) / stride + 1;
    const std::int64_t slice = v.extents[1] * v.extents[2];
    ws.windows.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        SlabWindow w;
        w.index = i;
        w.start = i * stride;
        w.slab = Tensor({window_depth, v.extents[1], v.extents[2]});
        std::copy(v.data.begin() + static_cast<std::ptrdiff_t>(w.start * slice),
                  v.data.begin() + static_cast<std::ptrdiff_t>((w.start + window_depth) * slice),
                  w.slab.data());
        ws.windows.push_back(std::move(w));
    }
    return ws;
}

std::pair<std::int64_t, std::int64_t> compose_keep_range(std::int64_t index,
                                                         std::int64_t window_count,
                                                         std::int64_t window_depth,
                                                         std::int64_t stride) {
    if (window_depth % 2 != 0 || stride % 2 != 0)
        throw GeometryError("compose: window depth and stride must be even");
    if (window_count == 1) return {0, window_depth};
    const std::int64_t half = stride / 2;
    const std::int64_t mid = window_depth / 2;
    if (index == 0) return {0, mid + half};
    if (index == window_count - 1) return {mid - half, window_depth};
    return {mid - half, mid + half};
}

Volume compose(const WindowSet& ws) {
    const std::int64_t d = ws.source[0], h = ws.source[1], w = ws.source[2];
    if (ws.window_depth <= 0 || ws.stride <= 0)
        throw GeometryError("compose: invalid window geometry");
    const std::int64_t n = (d - ws.window_depth) / ws.stride + 1;
    if (static_cast<std::int64_t>(ws.windows.size()) != n)
        throw CompletenessError("compose: expected " + std::to_string(n) + " windows, got " +
                                std::to_string(ws.windows.size()));
    std::vector<bool> seen(static_cast<std::size_t>(n), false);
    for (const SlabWindow& sw : ws.windows) {
        if (sw.index < 0 || sw.index >= n)
            throw CompletenessError("compose: window index " + std::to_string(sw.index) +
                                    " out of range");
        if (seen[static_cast<std::size_t>(sw.index)])
            throw CompletenessError("compose: duplicate window " + std::to_string(sw.index));
        seen[static_cast<std::size_t>(sw.index)] = true;
        if (sw.slab.rank() != 3 || sw.slab.extent(0) != ws.window_depth ||
            sw.slab.extent(1) != h || sw.slab.extent(2) != w)
            throw DimensionError("compose: window " + std::to_string(sw.index) +
                                 " slab shape " + shape_str(sw.slab.shape()) +
                                 " does not match the window geometry");
        if (sw.start != sw.index * ws.stride)
            throw CompletenessError("compose: window " + std::to_string(sw.index) +
                                    " start slice " + std::to_string(sw.start) +
                                    " disagrees with its index");
    }

    Volume out(d, h, w);
    const std::int64_t slice = h * w;
    for (const SlabWindow& sw : ws.windows) {
        const auto [first, last] = compose_keep_range(sw.index, n, ws.window_depth, ws.stride);
        for (std::int64_t j = first; j < last; ++j) {
            const float* src = sw.slab.data() + j * slice;
            float* dst = out.data.data() + (sw.start + j) * slice;
            std::copy(src, src + slice, dst);
        }
    }
    return out;
}

MaskVolume binarize(const Volume& pred, ThresholdMode mode, float threshold) {
    pred.validate();
    MaskVolume out(pred.extents[0], pred.extents[1], pred.extents[2]);
    if (mode == ThresholdMode::kLiteralRescale) {
        const auto [mn_it, mx_it] = std::minmax_element(pred.data.begin(), pred.data.end());
        const double mn = *mn_it, mx = *mx_it;
        if (mn == mx)
            throw DegenerateRangeError(
                "binarize: constant predictions cannot be rescaled onto [0,256]");
        const double scale = 256.0 / (mx - mn);
        for (std::size_t i = 0; i < out.data.size(); ++i)
            out.data[i] = (static_cast<double>(pred.data[i]) - mn) * scale >= 16.0 ? 1 : 0;
    } else {
        for (std::size_t i = 0; i < out.data.size(); ++i)
            out.data[i] = pred.data[i] >= threshold ? 1 : 0;
    }
    return out;
}

Tensor volume_to_tensor(const Volume& v) {
    Tensor t({1, 1, v.extents[0], v.extents[1], v.extents[2]});
    std::copy(v.data.begin(), v.data.end(), t.data());
    return t;
}

Tensor slab_to_tensor(const Tensor& slab) {
    if (slab.rank() != 3) throw DimensionError("slab_to_tensor expects a rank-3 tensor");
    return slab.reshaped({1, 1, slab.extent(0), slab.extent(1), slab.extent(2)});
}

Volume tensor_to_volume(const Tensor& t) {
    Shape s = t.shape();
    if (s.size() == 5) {
        if (s[0] != 1 || s[1] != 1)
            throw DimensionError("tensor_to_volume expects batch and channel extents of 1");
        s = {s[2], s[3], s[4]};
    }
    if (s.size() != 3) throw DimensionError("tensor_to_volume expects rank 3 or (1,1,d,h,w)");
    Volume v(s[0], s[1], s[2]);
    std::copy(t.data(), t.data() + t.numel(), v.data.begin());
    return v;
}

Tensor mask_to_tensor(const MaskVolume& m) {
    Tensor t({1, 1, m.extents[0], m.extents[1], m.extents[2]});
    for (std::int64_t i = 0; i < m.numel(); ++i)
        t[i] = static_cast<float>(m.data[static_cast<std::size_t>(i)]);
    return t;
}

namespace {

constexpr std::uint16_t kPv3dVersion = 1;

std::string pv3d_header(const std::array<std::int64_t, 3>& ext, std::uint8_t dtype) {
    std::string out = "PV3D";
    append_u16le(out, kPv3dVersion);
    for (int a = 0; a < 3; ++a) append_u32le(out, static_cast<std::uint32_t>(ext[a]));
    out.push_back(static_cast<char>(dtype));
    return out;
}

struct Pv3dHeader {
    std::array<std::int64_t, 3> ext;
    std::uint8_t dtype;
    std::size_t payload_offset;
};

Pv3dHeader parse_pv3d(const std::string& bytes, const std::string& path) {
    if (bytes.size() < 19 || bytes.compare(0, 4, "PV3D") != 0)
        throw FormatError(path + ": not a PV3D volume file");
    const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (read_u16le(p + 4) != kPv3dVersion)
        throw FormatError(path + ": unsupported PV3D version " + std::to_string(read_u16le(p + 4)));
    Pv3dHeader h;
    for (int a = 0; a < 3; ++a)
        h.ext[a] = static_cast<std::int64_t>(read_u32le(p + 6 + 4 * a));
    h.dtype = static_cast<std::uint8_t>(bytes[18]);
    h.payload_offset = 19;
    return h;
}

}  // namespace

void save_volume(const std::filesystem::path& path, const Volume& v) {
    v.validate();
    std::string bytes = pv3d_header(v.extents, 0);
    bytes.reserve(bytes.size() + v.data.size() * 4);
    for (float f : v.data) append_f32le(bytes, f);
    write_file_atomic(path, bytes);
}

Volume load_volume(const std::filesystem::path& path) {
    const std::string bytes = read_file_bytes(path);
    const Pv3dHeader h = parse_pv3d(bytes, path.string());
    if (h.dtype != 0)
        throw FormatError(path.string() + ": dtype " + std::to_string(h.dtype) +
                          " is not a float32 volume");
    Volume v(h.ext[0], h.ext[1], h.ext[2]);
    if (bytes.size() != h.payload_offset + v.data.size() * 4)
        throw FormatError(path.string() + ": payload size does not match extents");
    const unsigned char* p =
        reinterpret_cast<const unsigned char*>(bytes.data()) + h.payload_offset;
    for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = read_f32le(p + i * 4);
    v.provenance = path.filename().string();
    return v;
}

void save_mask(const std::filesystem::path& path, const MaskVolume& m) {
    m.validate();
    std::string bytes = pv3d_header(m.extents, 1);
    bytes.append(reinterpret_cast<const char*>(m.data.data()), m.data.size());
    write_file_atomic(path, bytes);
}

MaskVolume load_mask(const std::filesystem::path& path) {
    const std::string bytes = read_file_bytes(path);
    const Pv3dHeader h = parse_pv3d(bytes, path.string());
    if (h.dtype != 1)
        throw FormatError(path.string() + ": dtype " + std::to_string(h.dtype) +
                          " is not a uint8 mask");
    MaskVolume m(h.ext[0], h.ext[1], h.ext[2]);
    if (bytes.size() != h.payload_offset + m.data.size())
        throw FormatError(path.string() + ": payload size does not match extents");
    std::memcpy(m.data.data(), bytes.data() + h.payload_offset, m.data.size());
    m.validate();
    return m;
}

}  // namespace p3d
