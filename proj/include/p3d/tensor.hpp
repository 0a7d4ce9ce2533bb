#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "p3d/error.hpp"

namespace p3d {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

// Dense row-major N-d array, rank 1-5, last axis fastest. Activations use the
// (batch, channel, depth, height, width) convention throughout the toolkit.
template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(Shape shape, T fill = T{0})
        : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
    }

    TensorT(Shape shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape();
        if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
    }

    const Shape& shape() const { return shape_; }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t extent(std::int64_t axis) const { return shape_[static_cast<std::size_t>(axis)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // rank-5 accessor, (n, c, d, h, w)
    T& at5(std::int64_t n, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w) {
        return data_[static_cast<std::size_t>(
            (((n * shape_[1] + c) * shape_[2] + d) * shape_[3] + h) * shape_[4] + w)];
    }
    const T& at5(std::int64_t n, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w) const {
        return data_[static_cast<std::size_t>(
            (((n * shape_[1] + c) * shape_[2] + d) * shape_[3] + h) * shape_[4] + w)];
    }

    // rank-4 accessor, (n, c, h, w)
    T& at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
        return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    const T& at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }

    // rank-3 accessor, (d, h, w)
    T& at3(std::int64_t d, std::int64_t h, std::int64_t w) {
        return data_[static_cast<std::size_t>((d * shape_[1] + h) * shape_[2] + w)];
    }
    const T& at3(std::int64_t d, std::int64_t h, std::int64_t w) const {
        return data_[static_cast<std::size_t>((d * shape_[1] + h) * shape_[2] + w)];
    }

    // Same data, new shape; element count must be preserved.
    TensorT reshaped(Shape new_shape) const {
        if (shape_numel(new_shape) != numel())
            throw DimensionError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                                 " changes element count");
        TensorT out;
        out.shape_ = std::move(new_shape);
        out.data_ = data_;
        return out;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out(shape_);
        for (std::int64_t i = 0; i < numel(); ++i)
            out[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
        return out;
    }

private:
    void validate_shape() const {
        if (shape_.empty() || shape_.size() > 5)
            throw DimensionError("tensor rank must be 1-5, got " + std::to_string(shape_.size()));
        for (std::size_t i = 0; i < shape_.size(); ++i)
            if (shape_[i] <= 0)
                throw DimensionError("non-positive extent on axis " + std::to_string(i) +
                                     " in shape " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b))
        throw DimensionError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

}  // namespace p3d
