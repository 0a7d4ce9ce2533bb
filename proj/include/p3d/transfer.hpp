#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "p3d/conv.hpp"
#include "p3d/tensor.hpp"

namespace p3d {

// One named weight layer inside a manifest. The blob referenced by `file`
// holds the kernel elements in row-major order followed by the biases, as raw
// little-endian 32-bit floats; `crc` covers those bytes.
struct ManifestLayer {
    std::string name;
    std::string kind;         // "conv2d" | "conv3d"
    Shape kernel_shape;       // rank 4 (conv2d) or rank 5 (conv3d)
    std::int64_t bias_len = 0;
    std::string file;
    std::uint32_t crc = 0;
    std::vector<float> kernel_data;
    std::vector<float> bias_data;

    bool is_planar() const {
        return kind == "conv3d" && kernel_shape.size() == 5 && kernel_shape[2] == 1;
    }
    std::int64_t kernel_numel() const { return shape_numel(kernel_shape); }
};

struct WeightManifest {
    std::vector<ManifestLayer> layers;
    void validate() const;  // unique names, shapes matching data lengths
};

// The element-preserving 2D -> planar-3D lift: kernel (o,i,j,l) lands at
// (o,i,0,j,l), biases are kept as the same scalar values, stride and dilation
// default to 1. The depth-1 axis is the first spatial kernel axis because
// windows stack sagittal slices along depth.
ConvWeights map_kernel_2d_to_3d(const Kernel2D& k);

// Inverse on the image of the map: flattens the depth-1 axis away.
Kernel2D flatten_planar_to_2d(const ConvWeights& w);

// Maps every conv2d layer of the manifest; names, order and bias bytes are
// preserved. A conv3d layer in the input (already planar) is rejected rather
// than silently re-mapped.
WeightManifest map_weightset(const WeightManifest& manifest);

// Kernel elements plus biases, summed over layers.
std::int64_t count_params(const WeightManifest& manifest);

// Directory layout: manifest.json next to one .bin blob per layer.
void save_weights(const WeightManifest& manifest, const std::filesystem::path& dir);
WeightManifest load_weights(const std::filesystem::path& dir);

ManifestLayer layer_from_kernel2d(const std::string& name, const Kernel2D& k);
ManifestLayer layer_from_conv_weights(const std::string& name, const ConvWeights& w);
Kernel2D kernel2d_from_layer(const ManifestLayer& layer);
ConvWeights conv_weights_from_layer(const ManifestLayer& layer);

}  // namespace p3d
