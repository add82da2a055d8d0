#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "filmseg/errors.hpp"

namespace filmseg {

using Shape = std::vector<std::size_t>;

// Storage aligned to Eigen's widest packet. Eigen peels unaligned heads off
// vectorised loops, so the summation order would otherwise depend on where
// malloc happened to put a buffer, and repeated runs in one process would
// drift in the last bits.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major array of rank 1..4. The scalar type carries the precision:
// Tensor<float> for training, Tensor<double> for gradient checks.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
        check_rank();
    }

    Tensor(Shape shape, const std::vector<T>& values)
        : Tensor(std::move(shape), AlignedVector<T>(values.begin(), values.end())) {}

    Tensor(Shape shape, AlignedVector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
        check_rank();
        if (shape_size(shape_) != data_.size()) {
            throw DimensionError("tensor of shape " + shape_str(shape_) + " needs " +
                                 std::to_string(shape_size(shape_)) + " values, got " +
                                 std::to_string(data_.size()));
        }
    }

    static Tensor scalar(T v) { return Tensor(Shape{1}, AlignedVector<T>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::vector<T> buffer() const { return {data_.begin(), data_.end()}; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    // 4-rank accessor in (batch, channel, height, width) order.
    T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    T item() const {
        if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape shape) const {
        return Tensor(std::move(shape), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        AlignedVector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    void check_rank() const {
        if (shape_.empty() || shape_.size() > 4) {
            throw DimensionError("tensor rank must be 1..4, got " + std::to_string(shape_.size()));
        }
    }

    Shape shape_;
    AlignedVector<T> data_;
};

inline void require_shape(const Shape& got, const Shape& want, const char* what) {
    if (got != want) {
        throw DimensionError(std::string(what) + ": expected shape " + shape_str(want) + ", got " + shape_str(got));
    }
}

inline void require_rank(const Shape& got, std::size_t rank, const char* what) {
    if (got.size() != rank) {
        throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                             shape_str(got));
    }
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    require_shape(b.shape(), a.shape(), "max_abs_diff");
    T m{0};
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace filmseg
