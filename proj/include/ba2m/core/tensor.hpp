#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "ba2m/core/error.hpp"

namespace ba2m {

/// Dimensions of a dense row-major tensor. For 4-D tensors the order is N, C, H, W.
class Shape {
public:
    Shape() = default;
    Shape(std::initializer_list<std::size_t> dims);
    explicit Shape(std::vector<std::size_t> dims);

    std::size_t rank() const { return dims_.size(); }
    std::size_t operator[](std::size_t axis) const { return dims_.at(axis); }
    const std::vector<std::size_t>& dims() const { return dims_; }
    std::size_t numel() const { return numel_; }

    /// Product of the dims in [first, last).
    std::size_t span_size(std::size_t first, std::size_t last) const;

    std::string to_string() const;

    friend bool operator==(const Shape&, const Shape&) = default;

private:
    void validate();

    std::vector<std::size_t> dims_;
    std::size_t numel_ = 1;
};

/// Dense real array owning its storage. Gradient buffers live on Parameter and on tape nodes,
/// so a Tensor is a plain value.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{0});
    Tensor(Shape shape, std::vector<T> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }

    const Shape& shape() const { return shape_; }
    std::size_t numel() const { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_[axis]; }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);
    const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;

    /// Same data under a new shape with equal element count.
    Tensor reshaped(Shape shape) const;

    /// Elementwise conversion to another precision.
    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const;

private:
    std::size_t offset4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;

    Shape shape_;
    std::vector<T> data_;
};

/// Throws NumericError naming `where` when any element is NaN or infinite.
template <typename T>
void require_finite(const Tensor<T>& t, const std::string& where);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace ba2m
