#include "p3d/model.hpp"

#include <cmath>
#include <utility>

#include "json.hpp"
#include "p3d/error.hpp"
#include "p3d/io_util.hpp"
#include "p3d/rng.hpp"

namespace p3d {

using nlohmann::json;

NetworkSpec NetworkSpec::vgg16(double width_scale) {
    NetworkSpec s;
    s.width_scale = width_scale;
    const std::vector<std::pair<int, std::int64_t>> stages = {
        {2, 64}, {2, 128}, {3, 256}, {3, 512}, {3, 512}};
    for (const auto& [convs, ch] : stages) s.encoder.push_back({convs, ch});
    // decoder stage t mirrors the encoder stage it concatenates with
    for (std::size_t t = 0; t < stages.size(); ++t)
        s.decoder.push_back({stages[stages.size() - 1 - t].second});
    return s;
}

void NetworkSpec::validate() const {
    if (encoder.empty()) throw ContractError("network spec has no encoder stages");
    if (encoder.size() != decoder.size())
        throw ContractError("encoder has " + std::to_string(encoder.size()) +
                            " stages but decoder has " + std::to_string(decoder.size()));
    if (!(width_scale > 0.0)) throw ContractError("width_scale must be positive");
    for (const EncoderStageSpec& e : encoder)
        if (e.conv_count < 1 || e.channels < 1)
            throw ContractError("encoder stage needs conv_count >= 1 and channels >= 1");
    for (const DecoderStageSpec& d : decoder)
        if (d.channels < 1) throw ContractError("decoder stage needs channels >= 1");
}

std::int64_t NetworkSpec::scaled(std::int64_t channels) const {
    return std::max<std::int64_t>(1, std::llround(static_cast<double>(channels) * width_scale));
}

std::vector<std::int64_t> NetworkSpec::scaled_encoder_channels() const {
    std::vector<std::int64_t> out;
    for (const EncoderStageSpec& e : encoder) out.push_back(scaled(e.channels));
    return out;
}

std::vector<std::int64_t> NetworkSpec::scaled_decoder_channels() const {
    std::vector<std::int64_t> out;
    for (const DecoderStageSpec& d : decoder) out.push_back(scaled(d.channels));
    return out;
}

std::int64_t NetworkSpec::encoder_conv_count() const {
    std::int64_t n = 0;
    for (const EncoderStageSpec& e : encoder) n += e.conv_count;
    return n;
}

namespace {

json dims_json(Dims3 d) { return json::array({d.d, d.h, d.w}); }

void expect_dims(const json& j, Dims3 want, const std::string& what) {
    if (!j.is_array() || j.size() != 3 || j[0] != want.d || j[1] != want.h || j[2] != want.w)
        throw ContractError("network spec: unsupported " + what + " " + j.dump() + ", expected " +
                            dims_json(want).dump());
}

}  // namespace

std::string NetworkSpec::to_json() const {
    validate();
    json doc;
    doc["format"] = "p3d-netspec";
    doc["version"] = 1;
    doc["width_scale"] = width_scale;
    doc["encoder"] = json::array();
    for (const EncoderStageSpec& e : encoder)
        doc["encoder"].push_back({{"conv_count", e.conv_count},
                                  {"channels", e.channels},
                                  {"kernel", dims_json(kEncoderKernel)},
                                  {"activation", "relu"},
                                  {"pool", dims_json(kEncoderPool)}});
    doc["decoder"] = json::array();
    for (const DecoderStageSpec& d : decoder)
        doc["decoder"].push_back({{"channels", d.channels},
                                  {"conv_count", 2},
                                  {"upsample", dims_json(kDecoderUpsample)},
                                  {"kernel", dims_json(kDecoderKernel)},
                                  {"first_conv_dilation", dims_json(kDecoderDilation)}});
    doc["head"] = {{"kernel", json::array({1, 1, 1})}, {"channels", 1}, {"activation", "sigmoid"}};
    return doc.dump(2) + "\n";
}

NetworkSpec NetworkSpec::from_json(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("network spec: ") + e.what());
    }
    if (doc.value("format", "") != "p3d-netspec")
        throw FormatError("network spec: missing p3d-netspec format marker");
    NetworkSpec s;
    try {
        s.width_scale = doc.at("width_scale").get<double>();
        for (const json& je : doc.at("encoder")) {
            EncoderStageSpec e;
            e.conv_count = je.at("conv_count").get<int>();
            e.channels = je.at("channels").get<std::int64_t>();
            if (je.contains("kernel")) expect_dims(je["kernel"], kEncoderKernel, "encoder kernel");
            if (je.contains("pool")) expect_dims(je["pool"], kEncoderPool, "encoder pool");
            s.encoder.push_back(e);
        }
        for (const json& jd : doc.at("decoder")) {
            DecoderStageSpec d;
            d.channels = jd.at("channels").get<std::int64_t>();
            if (jd.contains("kernel")) expect_dims(jd["kernel"], kDecoderKernel, "decoder kernel");
            if (jd.contains("upsample"))
                expect_dims(jd["upsample"], kDecoderUpsample, "decoder upsample");
            if (jd.contains("first_conv_dilation"))
                expect_dims(jd["first_conv_dilation"], kDecoderDilation, "decoder dilation");
            s.decoder.push_back(d);
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("network spec: ") + e.what());
    }
    s.validate();
    return s;
}

void NetworkSpec::save(const std::filesystem::path& path) const {
    write_file_atomic(path, to_json());
}

NetworkSpec NetworkSpec::load(const std::filesystem::path& path) {
    return from_json(read_file_bytes(path));
}

NetLayer& Network::layer(const std::string& name) {
    for (NetLayer& l : layers)
        if (l.name == name) return l;
    throw ContractError("network has no layer '" + name + "'");
}

const NetLayer& Network::layer(const std::string& name) const {
    for (const NetLayer& l : layers)
        if (l.name == name) return l;
    throw ContractError("network has no layer '" + name + "'");
}

std::int64_t Network::param_count() const {
    std::int64_t n = 0;
    for (const NetLayer& l : layers)
        n += l.kernel.numel() + static_cast<std::int64_t>(l.bias.size());
    return n;
}

namespace {

// The sigmoid head starts at a small foreground prior instead of 0.5. On
// heavily unbalanced targets a 0.5 start lets the background term crush the
// foreground gradient before any features form and the network settles on
// all-negative predictions; starting at the prior balances the two classes'
// pull from the first step. logit(0.01).
constexpr float kHeadBiasPrior = -4.59512f;

struct LayerPlan {
    std::string name;
    Shape kernel_shape;  // (out, in, kd, kh, kw)
    bool encoder = false;
};

// Deterministic layer order: encoder stages, then per decoder stage
// up/conv1/conv2/proj, then the head.
std::vector<LayerPlan> plan_layers(const NetworkSpec& spec) {
    spec.validate();
    const auto enc_ch = spec.scaled_encoder_channels();
    const auto dec_ch = spec.scaled_decoder_channels();
    const std::int64_t stages = spec.stage_count();
    std::vector<LayerPlan> plan;

    std::int64_t in_ch = 3;
    for (std::int64_t s = 0; s < stages; ++s) {
        for (int j = 0; j < spec.encoder[static_cast<std::size_t>(s)].conv_count; ++j) {
            const std::int64_t out_ch = enc_ch[static_cast<std::size_t>(s)];
            plan.push_back({"enc" + std::to_string(s + 1) + "_conv" + std::to_string(j + 1),
                            {out_ch, in_ch, kEncoderKernel.d, kEncoderKernel.h, kEncoderKernel.w},
                            true});
            in_ch = out_ch;
        }
    }
    // in_ch now carries the bottleneck channel count
    for (std::int64_t t = 0; t < stages; ++t) {
        const std::string base = "dec" + std::to_string(t + 1) + "_";
        const std::int64_t out_ch = dec_ch[static_cast<std::size_t>(t)];
        const std::int64_t skip_ch = enc_ch[static_cast<std::size_t>(stages - 1 - t)];
        plan.push_back({base + "up",
                        {out_ch, in_ch, kDecoderUpsample.d, kDecoderUpsample.h, kDecoderUpsample.w},
                        false});
        const std::int64_t cat_ch = out_ch + skip_ch;
        plan.push_back({base + "conv1",
                        {out_ch, cat_ch, kDecoderKernel.d, kDecoderKernel.h, kDecoderKernel.w},
                        false});
        plan.push_back({base + "conv2",
                        {out_ch, out_ch, kDecoderKernel.d, kDecoderKernel.h, kDecoderKernel.w},
                        false});
        plan.push_back({base + "proj", {out_ch, cat_ch, 1, 1, 1}, false});
        in_ch = out_ch;
    }
    plan.push_back({"head", {1, in_ch, 1, 1, 1}, false});
    return plan;
}

}  // namespace

Network build(const NetworkSpec& spec, std::uint64_t init_seed,
              const WeightManifest* encoder_weights) {
    const std::vector<LayerPlan> plan = plan_layers(spec);

    std::size_t manifest_next = 0;
    if (encoder_weights) {
        encoder_weights->validate();
        const std::int64_t want = spec.encoder_conv_count();
        if (static_cast<std::int64_t>(encoder_weights->layers.size()) != want)
            throw ContractError("encoder manifest has " +
                                std::to_string(encoder_weights->layers.size()) +
                                " layers, the encoder spec needs " + std::to_string(want));
    }

    Network net;
    net.spec = spec;
    Rng rng(init_seed);
    for (const LayerPlan& lp : plan) {
        NetLayer layer;
        layer.name = lp.name;
        layer.encoder = lp.encoder;
        const std::int64_t out_ch = lp.kernel_shape[0];
        if (lp.encoder && encoder_weights) {
            const ManifestLayer& ml = encoder_weights->layers[manifest_next++];
            if (ml.kind != "conv3d" || !ml.is_planar())
                throw ContractError("layer '" + ml.name +
                                    "': encoder weights must be planar conv3d (map the 2D "
                                    "manifest first)");
            if (ml.kernel_shape != lp.kernel_shape)
                throw ContractError("layer '" + ml.name + "': manifest kernel " +
                                    shape_str(ml.kernel_shape) + " does not match spec layer " +
                                    lp.name + " " + shape_str(lp.kernel_shape));
            layer.kernel = Tensor(ml.kernel_shape, ml.kernel_data);
            layer.bias = ml.bias_data;
        } else {
            // He-style uniform fan-in init, biases zero
            layer.kernel = Tensor(lp.kernel_shape);
            const std::int64_t fan_in =
                lp.kernel_shape[1] * lp.kernel_shape[2] * lp.kernel_shape[3] * lp.kernel_shape[4];
            const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
            for (std::int64_t i = 0; i < layer.kernel.numel(); ++i)
                layer.kernel[i] = static_cast<float>(rng.uniform(-limit, limit));
            layer.bias.assign(static_cast<std::size_t>(out_ch),
                              lp.name == "head" ? kHeadBiasPrior : 0.0f);
        }
        net.layers.push_back(std::move(layer));
    }
    return net;
}

void set_encoder_trainable(Network& net, bool trainable) {
    for (NetLayer& l : net.layers)
        if (l.encoder) l.trainable = trainable;
}

Tape::Id Network::forward_on_tape(Tape& tape, Tape::Id input, bool with_grad,
                                  ActivationTrace* trace) const {
    spec.validate();
    const Tensor& in = tape.value(input);
    if (in.rank() != 5) throw DimensionError("network input must have rank 5 (n,c,d,h,w)");
    if (in.extent(1) != 3)
        throw DimensionError("network input must have 3 channels, got " +
                             std::to_string(in.extent(1)));
    const std::int64_t stages = spec.stage_count();
    const std::int64_t div = std::int64_t{1} << stages;
    if (in.extent(3) % div != 0 || in.extent(4) % div != 0)
        throw GeometryError("network input height/width " + std::to_string(in.extent(3)) + "x" +
                            std::to_string(in.extent(4)) + " must divide by 2^" +
                            std::to_string(stages));

    const auto leaf_pair = [&](const std::string& name) {
        const NetLayer& l = layer(name);
        const bool req = with_grad && l.trainable;
        const Tape::Id k = tape.leaf(l.kernel, name + ".kernel", req);
        const Tape::Id b = tape.leaf(
            Tensor({static_cast<std::int64_t>(l.bias.size())}, l.bias), name + ".bias", req);
        return std::make_pair(k, b);
    };
    const auto record_trace = [&](const std::string& key, Tape::Id id) {
        if (trace) (*trace)[key] = tape.value(id);
    };

    Tape::Id x = input;
    std::vector<Tape::Id> skips;
    for (std::int64_t s = 0; s < stages; ++s) {
        for (int j = 0; j < spec.encoder[static_cast<std::size_t>(s)].conv_count; ++j) {
            const auto [k, b] =
                leaf_pair("enc" + std::to_string(s + 1) + "_conv" + std::to_string(j + 1));
            x = tape.relu(tape.conv3d(x, k, b, {1, 1, 1}, {1, 1, 1}, PadMode::kSame));
        }
        record_trace("enc" + std::to_string(s + 1), x);
        skips.push_back(x);
        x = tape.maxpool3d(x, kEncoderPool, kEncoderPool);
    }

    for (std::int64_t t = 0; t < stages; ++t) {
        const std::string base = "dec" + std::to_string(t + 1) + "_";
        const auto [ku, bu] = leaf_pair(base + "up");
        const Tape::Id up = tape.transpose_conv3d(x, ku, bu, kDecoderUpsample, {1, 1, 1},
                                                  PadMode::kSame);
        const Tape::Id cat =
            tape.concat_channels(up, skips[static_cast<std::size_t>(stages - 1 - t)]);
        const auto [k1, b1] = leaf_pair(base + "conv1");
        const Tape::Id y1 =
            tape.relu(tape.conv3d(cat, k1, b1, {1, 1, 1}, kDecoderDilation, PadMode::kSame));
        const auto [k2, b2] = leaf_pair(base + "conv2");
        const Tape::Id y2 = tape.conv3d(y1, k2, b2, {1, 1, 1}, {1, 1, 1}, PadMode::kSame);
        const auto [kp, bp] = leaf_pair(base + "proj");
        const Tape::Id proj = tape.conv3d(cat, kp, bp, {1, 1, 1}, {1, 1, 1}, PadMode::kSame);
        x = tape.add(y2, proj);
        record_trace("dec" + std::to_string(t + 1), x);
    }

    const auto [kh, bh] = leaf_pair("head");
    const Tape::Id logits = tape.conv3d(x, kh, bh, {1, 1, 1}, {1, 1, 1}, PadMode::kSame);
    record_trace("logits", logits);
    const Tape::Id prob = tape.sigmoid(logits);
    record_trace("prob", prob);
    return prob;
}

Tensor Network::forward(const Tensor& batch, ActivationTrace* trace) const {
    Tape tape;
    const Tape::Id in = tape.leaf(batch);
    const Tape::Id out = forward_on_tape(tape, in, /*with_grad=*/false, trace);
    return tape.value(out);
}

void Network::apply_gradients_check_shapes(const GradientSet& grads) const {
    for (const auto& [name, g] : grads) {
        const auto dot = name.rfind('.');
        const NetLayer& l = layer(name.substr(0, dot));
        const std::string part = name.substr(dot + 1);
        if (part == "kernel" && !g.same_shape(l.kernel))
            throw ContractError("gradient shape mismatch for " + name);
        if (part == "bias" && g.numel() != static_cast<std::int64_t>(l.bias.size()))
            throw ContractError("gradient shape mismatch for " + name);
    }
}

WeightManifest Network::to_manifest() const {
    WeightManifest m;
    for (const NetLayer& l : layers) {
        ManifestLayer ml;
        ml.name = l.name;
        ml.kind = "conv3d";
        ml.kernel_shape = l.kernel.shape();
        ml.bias_len = static_cast<std::int64_t>(l.bias.size());
        ml.file = l.name + ".bin";
        ml.kernel_data = l.kernel.vec();
        ml.bias_data = l.bias;
        m.layers.push_back(std::move(ml));
    }
    return m;
}

void Network::load_parameters(const WeightManifest& manifest) {
    if (manifest.layers.size() != layers.size())
        throw ContractError("parameter manifest has " + std::to_string(manifest.layers.size()) +
                            " layers, the network has " + std::to_string(layers.size()));
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const ManifestLayer& ml = manifest.layers[i];
        NetLayer& l = layers[i];
        if (ml.name != l.name)
            throw ContractError("parameter manifest layer '" + ml.name +
                                "' does not match network layer '" + l.name + "'");
        if (ml.kernel_shape != l.kernel.shape())
            throw ContractError("layer '" + ml.name + "': kernel " + shape_str(ml.kernel_shape) +
                                " does not match network " + shape_str(l.kernel.shape()));
        l.kernel = Tensor(ml.kernel_shape, ml.kernel_data);
        l.bias = ml.bias_data;
    }
}

void save_network(const Network& net, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    net.spec.save(dir / "netspec.json");
    save_weights(net.to_manifest(), dir / "weights");
}

Network load_network(const std::filesystem::path& dir) {
    const NetworkSpec spec = NetworkSpec::load(dir / "netspec.json");
    Network net = build(spec, /*init_seed=*/0);
    net.load_parameters(load_weights(dir / "weights"));
    return net;
}

}  // namespace p3d
