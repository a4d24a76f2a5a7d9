// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace flocora {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major FP32 array with an optional gradient buffer.
///
/// Tensors are plain values: copying one copies its data (and its gradient,
/// if present). Every extent must be positive.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> values);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }
    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool on) { requires_grad_ = on; }

    bool has_grad() const { return !grad_.empty(); }
    std::span<float> grad() { return grad_; }
    std::span<const float> grad() const { return grad_; }
    /// Allocates (if needed) and zeroes the gradient buffer.
    void zero_grad();
    void clear_grad() { grad_.clear(); }

    /// Same data viewed with a different shape of equal element count.
    Tensor reshaped(Shape shape) const;

    bool all_finite() const;

private:
    Shape shape_;
    std::vector<float> data_;
    std::vector<float> grad_;
    bool requires_grad_ = false;
};

/// Bitwise equality of shape and data; gradients are ignored.
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace flocora
