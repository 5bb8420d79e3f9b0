#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ymask/error.h"

namespace ymask {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Row-major strides in elements.
inline std::vector<std::size_t> shape_strides(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

/// Dense row-major array with value semantics. Copies are deep; moves are cheap.
/// A rank-0 tensor (empty shape) holds a single scalar.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
        check_extents();
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        if (data_.size() != shape_numel(shape_)) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }
    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t numel() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    const std::vector<T>& vec() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    template <typename... Idx>
    T& at(Idx... idx) {
        return data_[offset({static_cast<std::size_t>(idx)...})];
    }
    template <typename... Idx>
    const T& at(Idx... idx) const {
        return data_[offset({static_cast<std::size_t>(idx)...})];
    }

    T item() const {
        if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    Tensor reshaped(Shape shape) const& {
        Tensor out(*this);
        out.reshape_inplace(std::move(shape));
        return out;
    }
    Tensor reshaped(Shape shape) && {
        reshape_inplace(std::move(shape));
        return std::move(*this);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    bool operator==(const Tensor& other) const = default;

private:
    void check_extents() const {
        for (auto e : shape_) {
            if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
        }
    }

    void reshape_inplace(Shape shape) {
        if (shape_numel(shape) != data_.size()) {
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        shape_ = std::move(shape);
    }

    std::size_t offset(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != shape_.size()) {
            throw DimensionError("index rank " + std::to_string(idx.size()) + " for tensor " + shape_str(shape_));
        }
        std::size_t off = 0;
        std::size_t k = 0;
        for (auto i : idx) {
            if (i >= shape_[k]) throw DimensionError("index out of range for " + shape_str(shape_));
            off = off * shape_[k] + i;
            ++k;
        }
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
};

}  // namespace ymask
