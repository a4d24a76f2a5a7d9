// SPDX-License-Identifier: Apache-2.0

#include "flocora/optim.hpp"

#include "flocora/error.hpp"

namespace flocora {

void sgd_momentum_step(Tensor& param, std::span<const float> grad, Tensor& velocity, float lr, float momentum) {
    if (grad.size() != param.size() || velocity.shape() != param.shape()) {
        throw ShapeError("sgd step: param " + to_string(param.shape()) + ", velocity " +
                         to_string(velocity.shape()) + ", grad of " + std::to_string(grad.size()) + " elements");
    }
    std::span<float> p = param.data();
    std::span<float> v = velocity.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = momentum * v[i] + grad[i];
        p[i] -= lr * v[i];
    }
}

SgdMomentum::SgdMomentum(float lr, float momentum) : lr_(lr), momentum_(momentum) {
    if (!(lr >= 0.0f) || !(momentum >= 0.0f) || !(momentum < 1.0f)) {
        throw ConfigError("sgd: need lr >= 0 and 0 <= momentum < 1");
    }
}

void SgdMomentum::step(std::map<std::string, Tensor>& params) {
    for (auto& [name, param] : params) {
        if (!param.requires_grad() || !param.has_grad()) {
            continue;
        }
        auto it = velocity_.find(name);
        if (it == velocity_.end()) {
            it = velocity_.emplace(name, Tensor(param.shape())).first;
        }
        sgd_momentum_step(param, param.grad(), it->second, lr_, momentum_);
    }
    ++steps_;
}

}  // namespace flocora
