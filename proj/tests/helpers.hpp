#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "p3d/conv.hpp"
#include "p3d/rng.hpp"
#include "p3d/tensor.hpp"

namespace testutil {

template <typename T>
p3d::TensorT<T> random_tensor(p3d::Rng& rng, p3d::Shape shape, double lo = -1.0, double hi = 1.0) {
    p3d::TensorT<T> t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
p3d::ConvWeightsT<T> random_conv_weights(p3d::Rng& rng, std::int64_t cout, std::int64_t cin,
                                         std::int64_t kd, std::int64_t kh, std::int64_t kw,
                                         p3d::PadMode pad = p3d::PadMode::kSame) {
    p3d::ConvWeightsT<T> w;
    w.kernels = random_tensor<T>(rng, {cout, cin, kd, kh, kw});
    w.biases.resize(static_cast<std::size_t>(cout));
    for (auto& b : w.biases) b = static_cast<T>(rng.uniform(-0.5, 0.5));
    w.padding = pad;
    return w;
}

template <typename T>
p3d::Kernel2DT<T> random_kernel2d(p3d::Rng& rng, std::int64_t cout, std::int64_t cin,
                                  std::int64_t kh, std::int64_t kw) {
    p3d::Kernel2DT<T> k;
    k.kernels = random_tensor<T>(rng, {cout, cin, kh, kw});
    k.biases.resize(static_cast<std::size_t>(cout));
    for (auto& b : k.biases) b = static_cast<T>(rng.uniform(-0.5, 0.5));
    return k;
}

template <typename T>
double dot(const p3d::TensorT<T>& a, const p3d::TensorT<T>& b) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

// Relative error with |reference| floored at 1 so near-cancelled sums do not
// explode the ratio.
template <typename T>
double max_rel_err(const p3d::TensorT<T>& a, const p3d::TensorT<T>& b) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double x = static_cast<double>(a[i]), y = static_cast<double>(b[i]);
        const double denom = std::max({std::abs(x), std::abs(y), 1.0});
        m = std::max(m, std::abs(x - y) / denom);
    }
    return m;
}

// Unique scratch directory under the build tree; removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::uint64_t counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("p3d_test_" + tag + "_" + std::to_string(++counter) + "_" +
                 std::to_string(static_cast<std::uint64_t>(
                     std::hash<std::string>{}(tag + std::to_string(counter)))));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace testutil
