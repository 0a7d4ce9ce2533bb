#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "p3d/autodiff.hpp"
#include "p3d/tensor.hpp"
#include "p3d/transfer.hpp"

namespace p3d {

// Architecture constants of the planar res-u-net family. The encoder works
// slice-wise: planar kernels and (1,2,2) pooling never mix depth, so a
// depth-16 window survives any number of stages.
inline constexpr Dims3 kEncoderKernel{1, 3, 3};
inline constexpr Dims3 kEncoderPool{1, 2, 2};
inline constexpr Dims3 kDecoderUpsample{1, 2, 2};
inline constexpr Dims3 kDecoderKernel{3, 3, 3};
inline constexpr Dims3 kDecoderDilation{1, 2, 2};  // first conv of each decoder block

struct EncoderStageSpec {
    int conv_count = 2;
    std::int64_t channels = 64;  // before width_scale
};

struct DecoderStageSpec {
    std::int64_t channels = 64;  // before width_scale
};

// Declarative description of the network: a VGG-16-topology planar encoder
// and a mirrored residual 3D decoder with dilated first convolutions and a
// sigmoid head. No batch normalization anywhere.
struct NetworkSpec {
    std::vector<EncoderStageSpec> encoder;
    std::vector<DecoderStageSpec> decoder;
    double width_scale = 1.0;

    static NetworkSpec vgg16(double width_scale = 1.0);

    void validate() const;
    std::int64_t stage_count() const { return static_cast<std::int64_t>(encoder.size()); }
    std::int64_t scaled(std::int64_t channels) const;
    std::vector<std::int64_t> scaled_encoder_channels() const;
    std::vector<std::int64_t> scaled_decoder_channels() const;
    std::int64_t encoder_conv_count() const;

    std::string to_json() const;
    static NetworkSpec from_json(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static NetworkSpec load(const std::filesystem::path& path);
};

// One parameterized convolution layer of the instantiated graph.
struct NetLayer {
    std::string name;
    Tensor kernel;  // rank 5
    std::vector<float> bias;
    bool trainable = true;
    bool encoder = false;
};

using ActivationTrace = std::map<std::string, Tensor>;

class Network {
public:
    NetworkSpec spec;
    std::vector<NetLayer> layers;

    NetLayer& layer(const std::string& name);
    const NetLayer& layer(const std::string& name) const;

    // Records the whole graph on the tape and returns the sigmoid output id.
    // Parameter leaves are named "<layer>.kernel" / "<layer>.bias"; frozen
    // layers are recorded without requires_grad. When `trace` is given, the
    // value of every stage output is copied into it ("enc1".."encS" pre-pool,
    // "dec1".."decS", "logits", "prob").
    Tape::Id forward_on_tape(Tape& tape, Tape::Id input, bool with_grad,
                             ActivationTrace* trace = nullptr) const;

    // Inference: (N,3,D,H,W) -> per-voxel probabilities (N,1,D,H,W), values
    // strictly inside (0,1). H and W must divide by 2^stage_count.
    Tensor forward(const Tensor& batch, ActivationTrace* trace = nullptr) const;

    std::int64_t param_count() const;
    void apply_gradients_check_shapes(const GradientSet& grads) const;

    WeightManifest to_manifest() const;
    void load_parameters(const WeightManifest& manifest);
};

// Instantiates the network. Decoder parameters (and the encoder, when no
// manifest is given) use a seeded He-style uniform fan-in scheme with zero
// biases; building twice with one seed is bit-identical. A supplied manifest
// must hold one planar conv3d layer per encoder convolution, shapes matching
// the stage table after width_scale.
Network build(const NetworkSpec& spec, std::uint64_t init_seed,
              const WeightManifest* encoder_weights = nullptr);

// Flips the trainable flag of every encoder parameter; decoder flags untouched.
void set_encoder_trainable(Network& net, bool trainable);

void save_network(const Network& net, const std::filesystem::path& dir);
Network load_network(const std::filesystem::path& dir);

}  // namespace p3d
