// SPDX-License-Identifier: Apache-2.0

#include "flocora/model.hpp"

#include <cmath>
#include <numeric>

#include "flocora/error.hpp"
#include "flocora/random.hpp"

namespace flocora {

std::string_view to_string(LayerKind kind) {
    switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::group_norm: return "group_norm";
    case LayerKind::relu: return "relu";
    case LayerKind::pool: return "pool";
    case LayerKind::fc: return "fc";
    case LayerKind::add: return "add";
    }
    return "?";
}

ModelSpec::ModelSpec(std::string name, Shape input_shape) : name_(std::move(name)), input_shape_(std::move(input_shape)) {
    if (input_shape_.size() != 3 || numel(input_shape_) == 0) {
        throw ConfigError("model input must be [C,H,W] with positive extents, got " + to_string(input_shape_));
    }
}

const Shape& ModelSpec::output_of(std::string_view name) const {
    if (name == kInput) {
        return input_shape_;
    }
    return layer(name).out_shape;
}

const Layer& ModelSpec::layer(std::string_view name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw ConfigError("model '" + name_ + "' has no layer named '" + std::string(name) + "'");
    }
    return layers_[it->second];
}

bool ModelSpec::contains(std::string_view name) const {
    return index_.find(name) != index_.end();
}

const Layer& ModelSpec::push(Layer layer, std::string from) {
    if (layer.name.empty() || layer.name == kInput || contains(layer.name)) {
        throw ConfigError("invalid or duplicate layer name '" + layer.name + "'");
    }
    if (layer.inputs.empty()) {
        if (from.empty()) {
            from = layers_.empty() ? std::string(kInput) : layers_.back().name;
        }
        layer.inputs.push_back(std::move(from));
    }
    index_.emplace(layer.name, layers_.size());
    layers_.push_back(std::move(layer));
    return layers_.back();
}

namespace {
std::string resolve_from(const std::vector<Layer>& layers, const std::string& from) {
    if (!from.empty()) {
        return from;
    }
    return layers.empty() ? std::string(ModelSpec::kInput) : layers.back().name;
}
}  // namespace

void ModelSpec::add_conv(std::string name, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                         std::size_t padding, std::string from) {
    from = resolve_from(layers_, from);
    const Shape& in = output_of(from);
    if (in.size() != 3) {
        throw ConfigError("conv '" + name + "' needs a [C,H,W] input, got " + to_string(in));
    }
    if (out_channels == 0 || kernel == 0 || stride == 0 || kernel > in[1] + 2 * padding ||
        kernel > in[2] + 2 * padding) {
        throw ConfigError("conv '" + name + "' has invalid geometry for input " + to_string(in));
    }
    Layer l;
    l.name = std::move(name);
    l.kind = LayerKind::conv;
    l.in_channels = in[0];
    l.out_channels = out_channels;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    l.out_shape = {out_channels, (in[1] + 2 * padding - kernel) / stride + 1, (in[2] + 2 * padding - kernel) / stride + 1};
    push(std::move(l), std::move(from));
}

void ModelSpec::add_group_norm(std::string name, std::string from) {
    from = resolve_from(layers_, from);
    const Shape& in = output_of(from);
    if (in.size() != 3) {
        throw ConfigError("group norm '" + name + "' needs a [C,H,W] input");
    }
    Layer l;
    l.name = std::move(name);
    l.kind = LayerKind::group_norm;
    l.in_channels = l.out_channels = in[0];
    l.groups = group_norm_groups_for(in[0]);
    l.out_shape = in;
    push(std::move(l), std::move(from));
}

void ModelSpec::add_relu(std::string name, std::string from) {
    from = resolve_from(layers_, from);
    Layer l;
    l.name = std::move(name);
    l.kind = LayerKind::relu;
    l.out_shape = output_of(from);
    push(std::move(l), std::move(from));
}

void ModelSpec::add_pool(std::string name, std::string from) {
    from = resolve_from(layers_, from);
    const Shape& in = output_of(from);
    if (in.size() != 3) {
        throw ConfigError("pool '" + name + "' needs a [C,H,W] input");
    }
    Layer l;
    l.name = std::move(name);
    l.kind = LayerKind::pool;
    l.in_channels = l.out_channels = in[0];
    l.out_shape = {in[0]};
    push(std::move(l), std::move(from));
}

void ModelSpec::add_fc(std::string name, std::size_t out_features, std::string from) {
    from = resolve_from(layers_, from);
    const Shape& in = output_of(from);
    if (in.size() != 1 || out_features == 0) {
        throw ConfigError("fc '" + name + "' needs a flat input, got " + to_string(in));
    }
    Layer l;
    l.name = std::move(name);
    l.kind = LayerKind::fc;
    l.in_channels = in[0];
    l.out_channels = out_features;
    l.out_shape = {out_features};
    push(std::move(l), std::move(from));
}

void ModelSpec::add_residual(std::string name, std::string lhs, std::string rhs) {
    if (output_of(lhs) != output_of(rhs)) {
        throw ConfigError("residual '" + name + "' joins " + to_string(output_of(lhs)) + " and " +
                          to_string(output_of(rhs)));
    }
    Layer l;
    l.name = std::move(name);
    l.kind = LayerKind::add;
    l.out_shape = output_of(lhs);
    l.inputs = {std::move(lhs), std::move(rhs)};
    push(std::move(l), {});
}

std::size_t ModelSpec::num_classes() const {
    if (layers_.empty() || layers_.back().out_shape.size() != 1) {
        throw ConfigError("model '" + name_ + "' does not end in a flat logit layer");
    }
    return layers_.back().out_shape[0];
}

std::string ModelSpec::final_fc() const {
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
        if (it->kind == LayerKind::fc) {
            return it->name;
        }
    }
    return {};
}

std::map<std::string, Shape> ModelSpec::param_shapes() const {
    std::map<std::string, Shape> out;
    for (const Layer& l : layers_) {
        switch (l.kind) {
        case LayerKind::conv:
            out[param_key(l.name, "kernel")] = {l.out_channels, l.in_channels, l.kernel, l.kernel};
            break;
        case LayerKind::group_norm:
            out[param_key(l.name, "gamma")] = {l.out_channels};
            out[param_key(l.name, "beta")] = {l.out_channels};
            break;
        case LayerKind::fc:
            out[param_key(l.name, "weight")] = {l.in_channels, l.out_channels};
            out[param_key(l.name, "bias")] = {l.out_channels};
            break;
        default:
            break;
        }
    }
    return out;
}

std::string param_key(std::string_view layer, std::string_view role) {
    std::string key(layer);
    key += '.';
    key += role;
    return key;
}

std::string_view param_role(std::string_view key) {
    const auto dot = key.rfind('.');
    return dot == std::string_view::npos ? key : key.substr(dot + 1);
}

std::string_view param_layer(std::string_view key) {
    const auto dot = key.rfind('.');
    return dot == std::string_view::npos ? std::string_view{} : key.substr(0, dot);
}

bool is_norm_param(std::string_view key) {
    const std::string_view role = param_role(key);
    return role == "gamma" || role == "beta";
}

std::size_t count_parameters(const ParamSet& params, ParamFilter filter) {
    std::size_t total = 0;
    for (const auto& [name, t] : params) {
        if (filter == ParamFilter::all || t.requires_grad()) {
            total += t.size();
        }
    }
    return total;
}

std::size_t group_norm_groups_for(std::size_t channels) {
    if (channels < 32) {
        return channels == 0 ? 1 : channels;
    }
    std::size_t g = 32;
    while (channels % g != 0) {
        --g;
    }
    return g;
}

ParamSet init_params(const ModelSpec& spec, std::uint64_t seed) {
    ParamSet params;
    for (const auto& [key, shape] : spec.param_shapes()) {
        Tensor t(shape);
        const std::string_view role = param_role(key);
        if (role == "kernel" || role == "weight") {
            const std::size_t fan_in = role == "kernel" ? numel(shape) / shape[0] : shape[0];
            const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
            Rng rng(derive_seed({seed, hash_name(key)}));
            std::uniform_real_distribution<float> dist(-bound, bound);
            for (float& v : t.data()) {
                v = dist(rng);
            }
        } else if (role == "gamma") {
            std::fill(t.data().begin(), t.data().end(), 1.0f);
        }
        t.set_requires_grad(true);
        params.emplace(key, std::move(t));
    }
    return params;
}

ModelSpec cifar_resnet_spec(std::string name, const std::vector<std::size_t>& widths,
                            const std::vector<std::size_t>& blocks, std::size_t num_classes, Shape input_shape) {
    if (widths.empty() || widths.size() != blocks.size()) {
        throw ConfigError("resnet: need one block count per stage width");
    }
    if (num_classes < 2) {
        throw ConfigError("resnet: num_classes must be >= 2");
    }
    ModelSpec spec(std::move(name), std::move(input_shape));
    spec.add_conv("stem.conv", widths[0], 3, 1, 1);
    spec.add_group_norm("stem.gn");
    spec.add_relu("stem.relu");
    std::string prev = "stem.relu";
    std::size_t channels = widths[0];
    for (std::size_t s = 0; s < widths.size(); ++s) {
        for (std::size_t b = 0; b < blocks[s]; ++b) {
            const std::string p = "layer" + std::to_string(s + 1) + "." + std::to_string(b) + ".";
            const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
            spec.add_conv(p + "conv1", widths[s], 3, stride, 1, prev);
            spec.add_group_norm(p + "gn1");
            spec.add_relu(p + "relu1");
            spec.add_conv(p + "conv2", widths[s], 3, 1, 1);
            spec.add_group_norm(p + "gn2");
            std::string shortcut = prev;
            if (stride != 1 || channels != widths[s]) {
                spec.add_conv(p + "shortcut.conv", widths[s], 1, stride, 0, prev);
                spec.add_group_norm(p + "shortcut.gn");
                shortcut = p + "shortcut.gn";
            }
            spec.add_residual(p + "add", p + "gn2", shortcut);
            spec.add_relu(p + "relu2");
            prev = p + "relu2";
            channels = widths[s];
        }
    }
    spec.add_pool("pool", prev);
    spec.add_fc("fc", num_classes);
    return spec;
}

Network build_resnet8(std::size_t num_classes, std::uint64_t seed) {
    ModelSpec spec = cifar_resnet_spec("resnet8", {64, 128, 256}, {1, 1, 1}, num_classes);
    ParamSet params = init_params(spec, seed);
    return {std::move(spec), std::move(params)};
}

Network build_resnet18(std::size_t num_classes, std::uint64_t seed) {
    ModelSpec spec = cifar_resnet_spec("resnet18", {64, 128, 256, 512}, {2, 2, 2, 2}, num_classes);
    ParamSet params = init_params(spec, seed);
    return {std::move(spec), std::move(params)};
}

Network build_tiny(std::size_t num_classes, std::uint64_t seed, Shape input_shape,
                   const std::vector<std::size_t>& widths) {
    if (num_classes < 2 || widths.size() != 3) {
        throw ConfigError("tiny model needs num_classes >= 2 and three widths");
    }
    ModelSpec spec("tiny", std::move(input_shape));
    for (std::size_t i = 0; i < 3; ++i) {
        const std::string n = std::to_string(i + 1);
        spec.add_conv("conv" + n, widths[i], 3, i == 0 ? 1 : 2, 1);
        spec.add_group_norm("gn" + n);
        spec.add_relu("relu" + n);
    }
    spec.add_pool("pool");
    spec.add_fc("fc", num_classes);
    ParamSet params = init_params(spec, seed);
    return {std::move(spec), std::move(params)};
}

Network build_model(std::string_view name, std::size_t num_classes, std::uint64_t seed, Shape input_shape) {
    if (name == "resnet8" || name == "resnet18") {
        if (input_shape.empty()) {
            input_shape = {3, 32, 32};
        }
        ModelSpec spec = name == "resnet8"
                             ? cifar_resnet_spec("resnet8", {64, 128, 256}, {1, 1, 1}, num_classes, input_shape)
                             : cifar_resnet_spec("resnet18", {64, 128, 256, 512}, {2, 2, 2, 2}, num_classes,
                                                 input_shape);
        ParamSet params = init_params(spec, seed);
        return {std::move(spec), std::move(params)};
    }
    if (name == "tiny") {
        return build_tiny(num_classes, seed, input_shape.empty() ? Shape{3, 16, 16} : input_shape);
    }
    throw ConfigError("unknown model '" + std::string(name) + "' (expected resnet8, resnet18 or tiny)");
}

Var run_layers(const ModelSpec& spec, Var input, const LayerHooks& hooks) {
    std::vector<Var> outputs;
    outputs.reserve(spec.layers().size());
    std::map<std::string_view, std::size_t> where;
    auto fetch = [&](const std::string& name) -> Var {
        if (name == ModelSpec::kInput) {
            return input;
        }
        return outputs[where.at(name)];
    };
    for (const Layer& l : spec.layers()) {
        const Var x = fetch(l.inputs.front());
        Var y;
        switch (l.kind) {
        case LayerKind::conv: y = hooks.conv(l, x); break;
        case LayerKind::group_norm: y = hooks.group_norm(l, x); break;
        case LayerKind::fc: y = hooks.fc(l, x); break;
        case LayerKind::relu: y = relu(x); break;
        case LayerKind::pool: y = avg_pool(x); break;
        case LayerKind::add: y = add(x, fetch(l.inputs[1])); break;
        }
        where.emplace(l.name, outputs.size());
        outputs.push_back(y);
    }
    return outputs.back();
}

namespace {
Tensor& require_param(ParamSet& params, const std::string& key) {
    auto it = params.find(key);
    if (it == params.end()) {
        throw ConfigError("missing parameter '" + key + "'");
    }
    return it->second;
}
}  // namespace

Var forward(Tape& tape, const ModelSpec& spec, ParamSet& params, const Tensor& batch) {
    if (batch.rank() != 4 || Shape(batch.shape().begin() + 1, batch.shape().end()) != spec.input_shape()) {
        throw ShapeError("batch " + to_string(batch.shape()) + " does not match model input " +
                         to_string(spec.input_shape()));
    }
    LayerHooks hooks;
    hooks.conv = [&](const Layer& l, Var x) {
        return conv2d(x, tape.parameter(require_param(params, param_key(l.name, "kernel"))), l.stride, l.padding);
    };
    hooks.group_norm = [&](const Layer& l, Var x) {
        return group_norm(x, l.groups, tape.parameter(require_param(params, param_key(l.name, "gamma"))),
                          tape.parameter(require_param(params, param_key(l.name, "beta"))));
    };
    hooks.fc = [&](const Layer& l, Var x) {
        return linear(x, tape.parameter(require_param(params, param_key(l.name, "weight"))),
                      tape.parameter(require_param(params, param_key(l.name, "bias"))));
    };
    return run_layers(spec, tape.constant(batch), hooks);
}

}  // namespace flocora
