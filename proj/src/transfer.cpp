#include "p3d/transfer.hpp"

#include <set>
#include <utility>

#include "json.hpp"
#include "p3d/error.hpp"
#include "p3d/io_util.hpp"

namespace p3d {

using nlohmann::json;

void WeightManifest::validate() const {
    std::set<std::string> names;
    for (const ManifestLayer& l : layers) {
        if (!names.insert(l.name).second)
            throw FormatError("duplicate layer name '" + l.name + "' in manifest");
        if (l.kind != "conv2d" && l.kind != "conv3d")
            throw FormatError("layer '" + l.name + "': unknown kind '" + l.kind + "'");
        const std::size_t expected_rank = l.kind == "conv2d" ? 4 : 5;
        if (l.kernel_shape.size() != expected_rank)
            throw FormatError("layer '" + l.name + "': " + l.kind + " kernel must have rank " +
                              std::to_string(expected_rank) + ", got " +
                              shape_str(l.kernel_shape));
        if (l.bias_len != l.kernel_shape[0])
            throw FormatError("layer '" + l.name + "': bias length " + std::to_string(l.bias_len) +
                              " != out_channels " + std::to_string(l.kernel_shape[0]));
        if (static_cast<std::int64_t>(l.kernel_data.size()) != l.kernel_numel() ||
            static_cast<std::int64_t>(l.bias_data.size()) != l.bias_len)
            throw FormatError("layer '" + l.name + "': declared shape " +
                              shape_str(l.kernel_shape) + " does not match held data");
    }
}

ConvWeights map_kernel_2d_to_3d(const Kernel2D& k) {
    k.validate();
    ConvWeights w;
    w.kernels = k.kernels.reshaped(
        {k.out_channels(), k.in_channels(), 1, k.kh(), k.kw()});
    w.biases = k.biases;
    w.dilation = {1, 1, 1};
    w.stride = {1, 1, 1};
    return w;
}

Kernel2D flatten_planar_to_2d(const ConvWeights& w) {
    w.validate();
    if (!w.is_planar())
        throw ContractError("flatten_planar_to_2d: kernel depth is " + std::to_string(w.kd()) +
                            ", expected 1");
    Kernel2D k;
    k.kernels = w.kernels.reshaped({w.out_channels(), w.in_channels(), w.kh(), w.kw()});
    k.biases = w.biases;
    return k;
}

WeightManifest map_weightset(const WeightManifest& manifest) {
    manifest.validate();
    for (const ManifestLayer& l : manifest.layers)
        if (l.kind != "conv2d")
            throw ContractError("map_weightset: layer '" + l.name + "' has kind '" + l.kind +
                                "', expected conv2d (already planar?)");
    WeightManifest out = manifest;
    for (ManifestLayer& l : out.layers) {
        l.kind = "conv3d";
        l.kernel_shape = {l.kernel_shape[0], l.kernel_shape[1], 1, l.kernel_shape[2],
                          l.kernel_shape[3]};
        // kernel and bias bytes are untouched, so the blob checksum carries over
    }
    return out;
}

std::int64_t count_params(const WeightManifest& manifest) {
    std::int64_t n = 0;
    for (const ManifestLayer& l : manifest.layers) n += l.kernel_numel() + l.bias_len;
    return n;
}

namespace {

std::string layer_blob(const ManifestLayer& l) {
    std::string blob = floats_to_le_bytes(l.kernel_data);
    blob += floats_to_le_bytes(l.bias_data);
    return blob;
}

}  // namespace

void save_weights(const WeightManifest& manifest, const std::filesystem::path& dir) {
    manifest.validate();
    std::filesystem::create_directories(dir);
    json doc;
    doc["format"] = "p3d-weights";
    doc["version"] = 1;
    doc["layers"] = json::array();
    for (const ManifestLayer& l : manifest.layers) {
        const std::string file = l.file.empty() ? l.name + ".bin" : l.file;
        const std::string blob = layer_blob(l);
        write_file_atomic(dir / file, blob);
        json jl;
        jl["name"] = l.name;
        jl["kind"] = l.kind;
        jl["shape"] = l.kernel_shape;
        jl["bias_len"] = l.bias_len;
        jl["file"] = file;
        jl["crc32"] = hex_u32(crc32(blob));
        doc["layers"].push_back(std::move(jl));
    }
    write_file_atomic(dir / "manifest.json", doc.dump(2) + "\n");
}

WeightManifest load_weights(const std::filesystem::path& dir) {
    const std::filesystem::path mf = dir / "manifest.json";
    json doc;
    try {
        doc = json::parse(read_file_bytes(mf));
    } catch (const json::parse_error& e) {
        throw FormatError("manifest " + mf.string() + ": " + e.what());
    }
    if (!doc.is_object() || doc.value("format", "") != "p3d-weights")
        throw FormatError("manifest " + mf.string() + ": missing p3d-weights format marker");

    WeightManifest out;
    for (const json& jl : doc.at("layers")) {
        ManifestLayer l;
        try {
            l.name = jl.at("name").get<std::string>();
            l.kind = jl.at("kind").get<std::string>();
            l.kernel_shape = jl.at("shape").get<Shape>();
            l.bias_len = jl.at("bias_len").get<std::int64_t>();
            l.file = jl.at("file").get<std::string>();
            l.crc = parse_hex_u32(jl.at("crc32").get<std::string>());
        } catch (const json::exception& e) {
            throw FormatError("manifest " + mf.string() + ": " + e.what());
        }

        const std::string blob = read_file_bytes(dir / l.file);
        const std::int64_t expected_floats = l.kernel_numel() + l.bias_len;
        if (static_cast<std::int64_t>(blob.size()) != expected_floats * 4)
            throw FormatError("layer '" + l.name + "': blob " + l.file + " holds " +
                              std::to_string(blob.size()) + " bytes, manifest declares " +
                              std::to_string(expected_floats * 4));
        if (crc32(blob) != l.crc)
            throw IntegrityError("layer '" + l.name + "': checksum mismatch on " + l.file);

        std::vector<float> all = le_bytes_to_floats(blob);
        l.kernel_data.assign(all.begin(), all.begin() + l.kernel_numel());
        l.bias_data.assign(all.begin() + l.kernel_numel(), all.end());
        out.layers.push_back(std::move(l));
    }
    out.validate();
    return out;
}

ManifestLayer layer_from_kernel2d(const std::string& name, const Kernel2D& k) {
    k.validate();
    ManifestLayer l;
    l.name = name;
    l.kind = "conv2d";
    l.kernel_shape = k.kernels.shape();
    l.bias_len = static_cast<std::int64_t>(k.biases.size());
    l.kernel_data = k.kernels.vec();
    l.bias_data = k.biases;
    return l;
}

ManifestLayer layer_from_conv_weights(const std::string& name, const ConvWeights& w) {
    w.validate();
    ManifestLayer l;
    l.name = name;
    l.kind = "conv3d";
    l.kernel_shape = w.kernels.shape();
    l.bias_len = static_cast<std::int64_t>(w.biases.size());
    l.kernel_data = w.kernels.vec();
    l.bias_data = w.biases;
    return l;
}

Kernel2D kernel2d_from_layer(const ManifestLayer& layer) {
    if (layer.kind != "conv2d")
        throw ContractError("layer '" + layer.name + "' is not conv2d");
    Kernel2D k;
    k.kernels = Tensor(layer.kernel_shape, layer.kernel_data);
    k.biases = layer.bias_data;
    return k;
}

ConvWeights conv_weights_from_layer(const ManifestLayer& layer) {
    if (layer.kind != "conv3d")
        throw ContractError("layer '" + layer.name + "' is not conv3d");
    ConvWeights w;
    w.kernels = Tensor(layer.kernel_shape, layer.kernel_data);
    w.biases = layer.bias_data;
    return w;
}

}  // namespace p3d
