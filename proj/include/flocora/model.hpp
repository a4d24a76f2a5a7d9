// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "flocora/autograd.hpp"
#include "flocora/tensor.hpp"

namespace flocora {

enum class LayerKind { conv, group_norm, relu, pool, fc, add };

std::string_view to_string(LayerKind kind);

struct Layer {
    std::string name;
    LayerKind kind = LayerKind::relu;
    /// Producing layers; "input" names the network input.
    std::vector<std::string> inputs;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t groups = 0;
    /// Per-example output extents: [C,H,W] for feature maps, [M] after pooling.
    Shape out_shape;
};

/// Named, ordered layer graph. Layers are appended in evaluation order and
/// each add_* call checks that the shapes chain.
class ModelSpec {
public:
    static constexpr std::string_view kInput = "input";

    ModelSpec(std::string name, Shape input_shape);

    // `from` defaults to the most recently added layer.
    void add_conv(std::string name, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                  std::size_t padding, std::string from = {});
    void add_group_norm(std::string name, std::string from = {});
    void add_relu(std::string name, std::string from = {});
    void add_pool(std::string name, std::string from = {});
    void add_fc(std::string name, std::size_t out_features, std::string from = {});
    void add_residual(std::string name, std::string lhs, std::string rhs);

    const std::string& name() const { return name_; }
    const Shape& input_shape() const { return input_shape_; }
    const std::vector<Layer>& layers() const { return layers_; }
    const Layer& layer(std::string_view name) const;
    bool contains(std::string_view name) const;
    /// Output width of the last layer (the logits).
    std::size_t num_classes() const;
    /// Name of the last fully-connected layer, or empty.
    std::string final_fc() const;
    /// Parameter key -> shape for every tensor this model owns.
    std::map<std::string, Shape> param_shapes() const;

private:
    const Layer& push(Layer layer, std::string from);
    const Shape& output_of(std::string_view name) const;

    std::string name_;
    Shape input_shape_;
    std::vector<Layer> layers_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

/// Parameter tensors keyed "<layer>.<role>", roles being kernel, gamma, beta,
/// weight, bias (plus lora_A / lora_B for adapters). std::map keeps a stable
/// name order.
using ParamSet = std::map<std::string, Tensor>;

std::string param_key(std::string_view layer, std::string_view role);
/// Role suffix of a key ("layer1.0.gn1.gamma" -> "gamma").
std::string_view param_role(std::string_view key);
/// Layer part of a key ("layer1.0.gn1.gamma" -> "layer1.0.gn1").
std::string_view param_layer(std::string_view key);
bool is_norm_param(std::string_view key);

struct Network {
    ModelSpec spec;
    ParamSet params;
};

enum class ParamFilter { all, trainable };

/// Exact element count over the selected tensors (trainable = requires_grad).
std::size_t count_parameters(const ParamSet& params, ParamFilter filter = ParamFilter::all);

/// 32 groups for channels >= 32 (when divisible), otherwise one group per channel.
std::size_t group_norm_groups_for(std::size_t channels);

/// Kaiming-uniform (fan-in) kernels and FC weights, zero biases, gamma = 1,
/// beta = 0. Each tensor draws from its own stream keyed by (seed, name), so
/// values do not depend on construction order. All tensors are trainable.
ParamSet init_params(const ModelSpec& spec, std::uint64_t seed);

/// Basic-block CIFAR ResNet: 3x3 stem to widths[0], blocks[s] basic blocks at
/// widths[s] (stride 2 entering every stage after the first, with a 1x1
/// conv + group-norm shortcut whenever the shape changes), global average
/// pool and a final FC.
ModelSpec cifar_resnet_spec(std::string name, const std::vector<std::size_t>& widths,
                            const std::vector<std::size_t>& blocks, std::size_t num_classes,
                            Shape input_shape = {3, 32, 32});

Network build_resnet8(std::size_t num_classes = 10, std::uint64_t seed = 0);
Network build_resnet18(std::size_t num_classes = 10, std::uint64_t seed = 0);
/// Plain three-conv desk-scale network (conv/GN/ReLU x3, pool, FC).
Network build_tiny(std::size_t num_classes, std::uint64_t seed, Shape input_shape = {3, 16, 16},
                   const std::vector<std::size_t>& widths = {8, 16, 32});
/// Dispatch by name: resnet8, resnet18, tiny.
Network build_model(std::string_view name, std::size_t num_classes, std::uint64_t seed, Shape input_shape = {});

/// Per-layer callbacks for the parameterised layer kinds; relu, pool and
/// residual adds are handled by run_layers itself.
struct LayerHooks {
    std::function<Var(const Layer&, Var)> conv;
    std::function<Var(const Layer&, Var)> group_norm;
    std::function<Var(const Layer&, Var)> fc;
};

Var run_layers(const ModelSpec& spec, Var input, const LayerHooks& hooks);

/// Forward pass of a plain (adapter-free) network; tensors with
/// requires_grad receive gradients on backward.
Var forward(Tape& tape, const ModelSpec& spec, ParamSet& params, const Tensor& batch);

}  // namespace flocora
