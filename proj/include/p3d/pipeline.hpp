#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "p3d/tensor.hpp"

namespace p3d {

// A single 3D scalar scan, row-major with W fastest.
struct Volume {
    std::array<std::int64_t, 3> extents{0, 0, 0};  // D, H, W
    std::vector<float> data;
    std::string provenance;

    Volume() = default;
    Volume(std::int64_t d, std::int64_t h, std::int64_t w, float fill = 0.0f)
        : extents{d, h, w},
          data(static_cast<std::size_t>(d * h * w), fill) {}

    std::int64_t numel() const { return extents[0] * extents[1] * extents[2]; }
    float& at(std::int64_t d, std::int64_t h, std::int64_t w) {
        return data[static_cast<std::size_t>((d * extents[1] + h) * extents[2] + w)];
    }
    float at(std::int64_t d, std::int64_t h, std::int64_t w) const {
        return data[static_cast<std::size_t>((d * extents[1] + h) * extents[2] + w)];
    }
    void validate() const;
};

// Binary label grid with the same layout.
struct MaskVolume {
    std::array<std::int64_t, 3> extents{0, 0, 0};
    std::vector<std::uint8_t> data;  // strictly {0,1}

    MaskVolume() = default;
    MaskVolume(std::int64_t d, std::int64_t h, std::int64_t w)
        : extents{d, h, w},
          data(static_cast<std::size_t>(d * h * w), 0) {}

    std::int64_t numel() const { return extents[0] * extents[1] * extents[2]; }
    std::uint8_t& at(std::int64_t d, std::int64_t h, std::int64_t w) {
        return data[static_cast<std::size_t>((d * extents[1] + h) * extents[2] + w)];
    }
    std::uint8_t at(std::int64_t d, std::int64_t h, std::int64_t w) const {
        return data[static_cast<std::size_t>((d * extents[1] + h) * extents[2] + w)];
    }
    std::int64_t positive_count() const;
    void validate() const;
};

// Overlapping fixed-depth slabs cut from a volume, with the metadata needed
// to reassemble the full prediction.
struct SlabWindow {
    std::int64_t index = 0;  // 0-based position in the sweep
    std::int64_t start = 0;  // first source slice covered
    Tensor slab;             // (window_depth, H, W)
};

struct WindowSet {
    std::int64_t window_depth = 16;
    std::int64_t stride = 8;
    std::array<std::int64_t, 3> source{0, 0, 0};
    std::vector<SlabWindow> windows;
};

// Separable interpolating quadratic-spline resampling onto the target grid.
// Output grid i maps to input coordinate i*(Nin-1)/(Nout-1) (endpoints
// aligned), so equal extents reproduce the input; constants and affine ramps
// are reproduced exactly by construction.
Volume resample(const Volume& v, std::array<std::int64_t, 3> target);

// Affine map sending min -> -1 and max -> +1.
Volume normalize_scan(const Volume& v);

// Axis permutation, e.g. rotating an axial volume into the sagittal stacking
// this pipeline expects. order[i] names the source axis that becomes output
// axis i (0=D, 1=H, 2=W).
Volume permute_axes(const Volume& v, std::array<int, 3> order);

// (N,1,D,H,W) -> (N,3,D,H,W) with three identical channels.
Tensor replicate_channels(const Tensor& slab);

WindowSet decompose(const Volume& v, std::int64_t window_depth = 16, std::int64_t stride = 8);

// Slices window i contributes to the composed volume, 0-based half-open
// [first, last). The first window keeps its leading slices and the last its
// trailing slices; interior windows keep their middle `stride` slices. The
// ranges tile [0, D) exactly once.
std::pair<std::int64_t, std::int64_t> compose_keep_range(std::int64_t index,
                                                         std::int64_t window_count,
                                                         std::int64_t window_depth,
                                                         std::int64_t stride);

Volume compose(const WindowSet& ws);

enum class ThresholdMode {
    kLiteralRescale,  // rescale predictions to [0,256] per scan, then threshold at 16
    kFixed          // threshold raw values directly
};

MaskVolume binarize(const Volume& pred, ThresholdMode mode, float threshold = 0.5f);

// Conversions between volumes and network tensors.
Tensor volume_to_tensor(const Volume& v);          // (1,1,D,H,W)
Tensor slab_to_tensor(const Tensor& slab);         // (D,H,W) -> (1,1,D,H,W)
Volume tensor_to_volume(const Tensor& t);          // (1,1,D,H,W) or (D,H,W)
Tensor mask_to_tensor(const MaskVolume& m);        // (1,1,D,H,W) of 0/1 floats

// Volume container format, bit-exact: magic "PV3D", version u16, extents
// D,H,W u32, dtype u8 (0 = float32, 1 = uint8 mask), raw little-endian data.
void save_volume(const std::filesystem::path& path, const Volume& v);
Volume load_volume(const std::filesystem::path& path);
void save_mask(const std::filesystem::path& path, const MaskVolume& m);
MaskVolume load_mask(const std::filesystem::path& path);

}  // namespace p3d
