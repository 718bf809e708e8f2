#include "ba2m/core/tensor.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace ba2m {

Shape::Shape(std::initializer_list<std::size_t> dims) : dims_(dims) { validate(); }

Shape::Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) { validate(); }

void Shape::validate() {
    numel_ = 1;
    for (std::size_t d : dims_) {
        if (d == 0) throw DimensionError("shape " + to_string() + " has a zero dimension");
        if (numel_ > std::numeric_limits<std::size_t>::max() / d)
            throw DimensionError("shape " + to_string() + " overflows the element count");
        numel_ *= d;
    }
}

std::size_t Shape::span_size(std::size_t first, std::size_t last) const {
    std::size_t n = 1;
    for (std::size_t i = first; i < last && i < dims_.size(); ++i) n *= dims_[i];
    return n;
}

std::string Shape::to_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) {
        if (i) os << ',';
        os << dims_[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_.numel(), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.numel())
        throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_.to_string());
}

template <typename T>
std::size_t Tensor<T>::offset4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
}

template <typename T>
T& Tensor<T>::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[offset4(n, c, h, w)];
}

template <typename T>
const T& Tensor<T>::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[offset4(n, c, h, w)];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
    if (shape.numel() != numel())
        throw DimensionError("cannot reshape " + shape_.to_string() + " to " + shape.to_string());
    return Tensor(std::move(shape), data_);
}

template <typename T>
bool Tensor<T>::all_finite() const {
    for (T v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

template <typename T>
void require_finite(const Tensor<T>& t, const std::string& where) {
    const auto data = t.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (!std::isfinite(data[i])) {
            std::ostringstream os;
            os << where << ": non-finite value " << data[i] << " at flat index " << i << " of tensor "
               << t.shape().to_string();
            throw NumericError(os.str());
        }
    }
}

template class Tensor<float>;
template class Tensor<double>;
template void require_finite(const Tensor<float>&, const std::string&);
template void require_finite(const Tensor<double>&, const std::string&);

}  // namespace ba2m
