// SPDX-License-Identifier: Apache-2.0

#include "flocora/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "flocora/error.hpp"

namespace flocora {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
        n *= e;
    }
    return n;
}

std::string to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            s += ",";
        }
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace {
void check_extents(const Shape& shape) {
    if (shape.empty()) {
        throw ShapeError("tensor shape must have at least one extent");
    }
    for (std::size_t e : shape) {
        if (e == 0) {
            throw ShapeError("tensor extents must be positive, got " + to_string(shape));
        }
    }
}
}  // namespace

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
    check_extents(shape_);
    data_.assign(numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), data_(std::move(values)) {
    check_extents(shape_);
    if (numel(shape_) != data_.size()) {
        throw ShapeError("shape " + to_string(shape_) + " needs " + std::to_string(numel(shape_)) +
                         " values, got " + std::to_string(data_.size()));
    }
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape_));
    }
    return shape_[axis];
}

void Tensor::zero_grad() {
    grad_.assign(data_.size(), 0.0f);
}

Tensor Tensor::reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
        throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    Tensor out(std::move(shape), data_);
    out.requires_grad_ = requires_grad_;
    return out;
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        return false;
    }
    return a.size() == 0 || std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0;
}

}  // namespace flocora
