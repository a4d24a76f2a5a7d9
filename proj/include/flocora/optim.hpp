// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <span>
#include <string>

#include "flocora/tensor.hpp"

namespace flocora {

/// One classical-momentum update: v <- momentum * v + g; p <- p - lr * v.
void sgd_momentum_step(Tensor& param, std::span<const float> grad, Tensor& velocity, float lr, float momentum);

/// SGD with momentum over a named parameter set. Velocity buffers are created
/// lazily (zero) on the first step and live as long as the optimizer.
class SgdMomentum {
public:
    SgdMomentum(float lr, float momentum);

    /// Steps every tensor in `params` that carries a gradient.
    void step(std::map<std::string, Tensor>& params);
    void reset() { velocity_.clear(); }

    float lr() const { return lr_; }
    float momentum() const { return momentum_; }
    std::size_t steps_taken() const { return steps_; }

private:
    float lr_;
    float momentum_;
    std::size_t steps_ = 0;
    std::map<std::string, Tensor> velocity_;
};

}  // namespace flocora
