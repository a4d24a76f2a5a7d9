// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "flocora/tensor.hpp"

namespace flocora {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// tape is alive.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

/// Records one forward pass so that gradients can be replayed in reverse.
///
/// Leaves come in three flavours: owned constants, borrowed constants (the
/// frozen base weights, never copied), and parameters whose gradient is
/// written back into the caller's Tensor by backward(). A tape built with
/// grad_enabled = false records values only.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    /// Borrowed leaf; `value` must outlive the tape.
    Var constant_ref(const Tensor& value);
    /// Leaf whose gradient lands in `param.grad()` after backward(), provided
    /// param.requires_grad() is set. Otherwise behaves like constant_ref.
    Var parameter(Tensor& param);

    /// Appends an op result. `backward` receives this tape and the new node's
    /// id; it is dropped when no input needs a gradient.
    Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

    const Tensor& value(std::size_t id) const;
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    /// Gradient accumulator of a node, allocated on first use.
    std::span<float> grad(std::size_t id);
    std::span<const float> grad(Var v) const;

    /// Reverse sweep from a scalar loss. Populates every reachable
    /// requires_grad parameter's gradient buffer (overwriting it).
    void backward(Var loss);

    std::size_t size() const { return nodes_.size(); }
    bool grad_enabled() const { return grad_enabled_; }

private:
    struct Node {
        Tensor owned;
        const Tensor* borrowed = nullptr;
        Tensor* sink = nullptr;
        bool needs_grad = false;
        std::vector<float> grad;
        BackwardFn backward;
    };

    Var push(Node node);

    std::vector<Node> nodes_;
    bool grad_enabled_;
};

// Differentiable ops. No broadcasting: shapes must agree exactly unless an
// op states otherwise.

/// Cross-correlation of input [N,I,H,W] with kernel [O,I,K,K].
Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t padding);
/// Group normalization of [N,C,H,W] followed by per-channel affine gamma/beta [C].
Var group_norm(Var input, std::size_t groups, Var gamma, Var beta, float eps = 1e-5f);
/// input [N,D] x weight [D,M].
Var matmul(Var input, Var weight);
/// input [N,D] x weight [D,M] + bias [M].
Var linear(Var input, Var weight, Var bias);
Var relu(Var input);
/// Global average pooling [N,C,H,W] -> [N,C].
Var avg_pool(Var input);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float factor);
/// Sum of all elements, as a [1] tensor.
Var sum(Var a);
/// Mean cross-entropy of logits [N,K] against labels in [0,K).
Var softmax_cross_entropy(Var logits, std::span<const int> labels);

}  // namespace flocora
