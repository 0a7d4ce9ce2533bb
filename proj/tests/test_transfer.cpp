#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>

#include "helpers.hpp"
#include "p3d/conv.hpp"
#include "p3d/io_util.hpp"
#include "p3d/rng.hpp"
#include "p3d/transfer.hpp"

using namespace p3d;
using testutil::random_kernel2d;
using testutil::random_tensor;
using testutil::TempDir;

namespace {

WeightManifest vgg16_style_manifest(Rng& rng, std::int64_t scale_div = 8) {
    // the 13-conv VGG-16 topology, channels divided for test speed
    const std::vector<std::pair<std::int64_t, std::int64_t>> shapes = {
        {64, 3},   {64, 64},   {128, 64},  {128, 128}, {256, 128}, {256, 256}, {256, 256},
        {512, 256}, {512, 512}, {512, 512}, {512, 512}, {512, 512}, {512, 512}};
    WeightManifest m;
    int block = 1, conv = 1;
    const std::vector<int> convs_per_block = {2, 2, 3, 3, 3};
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        const std::int64_t cout = std::max<std::int64_t>(1, shapes[i].first / scale_div);
        const std::int64_t cin =
            i == 0 ? 3 : std::max<std::int64_t>(1, shapes[i].second / scale_div);
        m.layers.push_back(layer_from_kernel2d(
            "block" + std::to_string(block) + "_conv" + std::to_string(conv),
            random_kernel2d<float>(rng, cout, cin, 3, 3)));
        if (++conv > convs_per_block[static_cast<std::size_t>(block - 1)]) {
            ++block;
            conv = 1;
        }
    }
    return m;
}

}  // namespace

TEST_CASE("kernel mapping transcribes elements and biases") {
    Kernel2D k;
    k.kernels = Tensor({1, 1, 3, 3}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});
    k.biases = {0.5f};
    const ConvWeights w = map_kernel_2d_to_3d(k);
    CHECK(w.kernels.shape() == Shape({1, 1, 1, 3, 3}));
    for (std::int64_t j = 0; j < 3; ++j)
        for (std::int64_t l = 0; l < 3; ++l)
            CHECK(w.kernels.at5(0, 0, 0, j, l) == k.kernels.at4(0, 0, j, l));
    CHECK(w.biases == std::vector<float>{0.5f});
    CHECK(w.is_planar());
    CHECK(w.stride.d == 1);
    CHECK(w.dilation.w == 1);
}

TEST_CASE("zero kernels map to zero planar kernels") {
    Kernel2D k;
    k.kernels = Tensor({2, 3, 3, 3}, 0.0f);
    k.biases = {0.0f, 0.0f};
    const ConvWeights w = map_kernel_2d_to_3d(k);
    for (std::int64_t i = 0; i < w.kernels.numel(); ++i) CHECK(w.kernels[i] == 0.0f);
}

TEST_CASE("mapping then flattening the depth axis is the bitwise identity") {
    Rng rng(15);
    const Kernel2D k = random_kernel2d<float>(rng, 4, 2, 3, 3);
    const Kernel2D back = flatten_planar_to_2d(map_kernel_2d_to_3d(k));
    CHECK(back.kernels.shape() == k.kernels.shape());
    CHECK(max_abs_diff(back.kernels, k.kernels) == 0.0);
    CHECK(back.biases == k.biases);
}

TEST_CASE("mapped planar kernels convolve slice-wise on whole volumes") {
    Rng rng(16);
    for (int rep = 0; rep < 5; ++rep) {
        const Kernel2D k = random_kernel2d<float>(rng, 2, 2, 3, 3);
        ConvWeights w = map_kernel_2d_to_3d(k);
        w.padding = PadMode::kSame;
        const Tensor vol = random_tensor<float>(rng, {1, 2, 6, 8, 8});
        const Tensor y3 = conv3d(vol, w);
        for (std::int64_t d = 0; d < 6; ++d) {
            Tensor x2({1, 2, 8, 8});
            for (std::int64_t c = 0; c < 2; ++c)
                for (std::int64_t i = 0; i < 8; ++i)
                    for (std::int64_t j = 0; j < 8; ++j)
                        x2.at4(0, c, i, j) = vol.at5(0, c, d, i, j);
            const Tensor y2 = conv2d(x2, k, PadMode::kSame);
            for (std::int64_t c = 0; c < 2; ++c)
                for (std::int64_t i = 0; i < 8; ++i)
                    for (std::int64_t j = 0; j < 8; ++j)
                        CHECK(std::abs(y3.at5(0, c, d, i, j) - y2.at4(0, c, i, j)) <= 1e-6f);
        }
    }
}

TEST_CASE("map_weightset lifts a 13-layer 2d manifest to planar form") {
    Rng rng(17);
    const WeightManifest m2d = vgg16_style_manifest(rng);
    REQUIRE(m2d.layers.size() == 13);
    const WeightManifest m3d = map_weightset(m2d);
    REQUIRE(m3d.layers.size() == 13);
    for (std::size_t i = 0; i < 13; ++i) {
        const ManifestLayer& a = m2d.layers[i];
        const ManifestLayer& b = m3d.layers[i];
        CHECK(b.name == a.name);
        CHECK(b.kind == "conv3d");
        CHECK(b.is_planar());
        REQUIRE(b.kernel_shape.size() == 5);
        CHECK(b.kernel_shape[2] == 1);
        CHECK(b.kernel_shape[0] == a.kernel_shape[0]);
        CHECK(b.kernel_shape[1] == a.kernel_shape[1]);
        CHECK(b.kernel_data == a.kernel_data);
        CHECK(b.bias_data == a.bias_data);
        // bias bytes unchanged, so their checksum carries over
        CHECK(crc32(floats_to_le_bytes(b.bias_data)) == crc32(floats_to_le_bytes(a.bias_data)));
    }
}

TEST_CASE("map_weightset edge cases") {
    SUBCASE("empty manifest maps to empty") {
        CHECK(map_weightset(WeightManifest{}).layers.empty());
    }
    SUBCASE("a planar layer in the input is rejected, never re-mapped") {
        Rng rng(18);
        WeightManifest m = map_weightset(vgg16_style_manifest(rng));
        CHECK_THROWS_AS(map_weightset(m), ContractError);
    }
}

TEST_CASE("count_params arithmetic") {
    SUBCASE("hand-counted single layer") {
        Rng rng(19);
        WeightManifest m;
        m.layers.push_back(layer_from_kernel2d("l", random_kernel2d<float>(rng, 2, 3, 3, 3)));
        CHECK(count_params(m) == 2 * 3 * 3 * 3 + 2);  // 56
    }
    SUBCASE("invariant under mapping") {
        Rng rng(20);
        for (int rep = 0; rep < 5; ++rep) {
            const WeightManifest m = vgg16_style_manifest(rng, 8 + rep);
            CHECK(count_params(map_weightset(m)) == count_params(m));
        }
    }
    SUBCASE("empty manifest") { CHECK(count_params(WeightManifest{}) == 0); }
}

TEST_CASE("manifest io roundtrip is byte exact") {
    Rng rng(21);
    TempDir dir("manifest");
    WeightManifest m;
    for (int i = 0; i < 3; ++i)
        m.layers.push_back(layer_from_kernel2d("layer" + std::to_string(i),
                                               random_kernel2d<float>(rng, 2 + i, 1 + i, 3, 3)));
    save_weights(m, dir.path());
    const WeightManifest back = load_weights(dir.path());
    REQUIRE(back.layers.size() == m.layers.size());
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        CHECK(back.layers[i].name == m.layers[i].name);
        CHECK(back.layers[i].kernel_shape == m.layers[i].kernel_shape);
        CHECK(back.layers[i].kernel_data == m.layers[i].kernel_data);
        CHECK(back.layers[i].bias_data == m.layers[i].bias_data);
    }
}

TEST_CASE("manifest io failure modes") {
    Rng rng(22);
    TempDir dir("manifest_bad");
    WeightManifest m;
    m.layers.push_back(layer_from_kernel2d("only", random_kernel2d<float>(rng, 2, 2, 3, 3)));
    save_weights(m, dir.path());

    SUBCASE("truncated blob is a format error") {
        const auto file = dir.path() / "only.bin";
        std::string bytes = read_file_bytes(file);
        bytes.resize(bytes.size() - 4);
        write_file_atomic(file, bytes);
        CHECK_THROWS_AS(load_weights(dir.path()), FormatError);
    }
    SUBCASE("corrupted byte is an integrity error") {
        const auto file = dir.path() / "only.bin";
        std::string bytes = read_file_bytes(file);
        bytes[7] = static_cast<char>(bytes[7] ^ 0x40);
        write_file_atomic(file, bytes);
        CHECK_THROWS_AS(load_weights(dir.path()), IntegrityError);
    }
    SUBCASE("missing manifest is a format error") {
        CHECK_THROWS_AS(load_weights(dir.path() / "nowhere"), FormatError);
    }
}
