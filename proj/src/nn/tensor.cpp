#include "seqcls/nn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace seqcls::nn {

std::int64_t numel_of(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(numel_of(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (numel_of(shape_) != static_cast<std::int64_t>(data_.size()))
        throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_str(shape_));
}

std::int64_t Tensor::dim(int i) const {
    const int r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw std::out_of_range("dim index out of range for shape " + shape_str(shape_));
    return shape_[static_cast<std::size_t>(i)];
}

std::int64_t Tensor::offset(std::initializer_list<std::int64_t> index) const {
    if (static_cast<int>(index.size()) != rank()) throw std::invalid_argument("index rank mismatch");
    std::int64_t off = 0;
    std::size_t k = 0;
    for (auto i : index) {
        const auto d = shape_[k++];
        if (i < 0 || i >= d) throw std::out_of_range("tensor index out of range");
        off = off * d + i;
    }
    return off;
}

double& Tensor::at(std::initializer_list<std::int64_t> index) { return data_[static_cast<std::size_t>(offset(index))]; }
double Tensor::at(std::initializer_list<std::int64_t> index) const {
    return data_[static_cast<std::size_t>(offset(index))];
}

void Tensor::reshape_(Shape shape) {
    if (numel_of(shape) != numel())
        throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    shape_ = std::move(shape);
}

Tensor Tensor::reshaped(Shape shape) const {
    Tensor t = *this;
    t.reshape_(std::move(shape));
    return t;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_(const Tensor& other) {
    if (other.numel() != numel()) throw std::invalid_argument("add_: size mismatch");
    const double* src = other.data();
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += src[i];
}

void Tensor::add_scaled_(const Tensor& other, double scale) {
    if (other.numel() != numel()) throw std::invalid_argument("add_scaled_: size mismatch");
    const double* src = other.data();
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += scale * src[i];
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           (a.numel() == 0 || std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.numel())) == 0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) throw std::invalid_argument("max_abs_diff: size mismatch");
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace seqcls::nn
