// SPDX-License-Identifier: Apache-2.0

#include "flocora/lora.hpp"

#include <algorithm>
#include <cmath>

#include "flocora/error.hpp"
#include "flocora/random.hpp"

namespace flocora {

std::string_view to_string(FreezeVariant v) {
    switch (v) {
    case FreezeVariant::none: return "none";
    case FreezeVariant::vanilla: return "vanilla";
    case FreezeVariant::plus_norm: return "plus_norm";
    case FreezeVariant::plus_norm_plus_final_fc: return "plus_norm_plus_final_fc";
    }
    return "?";
}

FreezeVariant parse_freeze_variant(std::string_view s) {
    for (FreezeVariant v : {FreezeVariant::none, FreezeVariant::vanilla, FreezeVariant::plus_norm,
                            FreezeVariant::plus_norm_plus_final_fc}) {
        if (s == to_string(v)) {
            return v;
        }
    }
    throw ConfigError("unknown freeze policy '" + std::string(s) + "'");
}

Var adapter_forward(Var input, Var kernel, Var lora_b, Var lora_a, float scaling, std::size_t stride,
                    std::size_t padding) {
    const Shape& w = kernel.shape();
    const Shape& b = lora_b.shape();
    const Shape& a = lora_a.shape();
    if (w.size() != 4 || b.size() != 4 || a.size() != 4 || b[1] != w[1] || b[2] != w[2] || b[3] != w[3] ||
        a[0] != w[0] || a[1] != b[0] || a[2] != 1 || a[3] != 1) {
        throw ShapeError("adapter shapes B " + to_string(b) + ", A " + to_string(a) + " do not fit kernel " +
                         to_string(w));
    }
    const Var base = conv2d(input, kernel, stride, padding);
    const Var low = conv2d(conv2d(input, lora_b, stride, padding), lora_a, 1, 0);
    return add(base, scale(low, scaling));
}

Var adapter_linear(Var input, Var weight, Var bias, Var lora_b, Var lora_a, float scaling) {
    const Shape& w = weight.shape();
    const Shape& b = lora_b.shape();
    const Shape& a = lora_a.shape();
    if (w.size() != 2 || b.size() != 2 || a.size() != 2 || b[0] != w[0] || a[1] != w[1] || b[1] != a[0]) {
        throw ShapeError("adapter shapes B " + to_string(b) + ", A " + to_string(a) + " do not fit weight " +
                         to_string(w));
    }
    const Var base = linear(input, weight, bias);
    const Var low = matmul(matmul(input, lora_b), lora_a);
    return add(base, scale(low, scaling));
}

Tensor merge_adapter(const Tensor& weight, const AdapterPair& pair) {
    const float s = pair.scaling();
    Tensor out = weight;
    out.clear_grad();
    out.set_requires_grad(false);
    const std::size_t r = pair.rank;
    if (weight.rank() == 4) {
        const std::size_t o_count = weight.dim(0);
        const std::size_t patch = weight.size() / o_count;
        if (pair.B.shape() != Shape{r, weight.dim(1), weight.dim(2), weight.dim(3)} ||
            pair.A.shape() != Shape{o_count, r, 1, 1}) {
            throw ShapeError("cannot merge adapter B " + to_string(pair.B.shape()) + ", A " + to_string(pair.A.shape()) +
                             " into " + to_string(weight.shape()));
        }
        for (std::size_t o = 0; o < o_count; ++o) {
            for (std::size_t p = 0; p < patch; ++p) {
                float acc = 0.0f;
                for (std::size_t k = 0; k < r; ++k) {
                    acc += pair.A[o * r + k] * pair.B[k * patch + p];
                }
                out[o * patch + p] += s * acc;
            }
        }
        return out;
    }
    if (weight.rank() == 2) {
        const std::size_t d = weight.dim(0), m = weight.dim(1);
        if (pair.B.shape() != Shape{d, r} || pair.A.shape() != Shape{r, m}) {
            throw ShapeError("cannot merge adapter B " + to_string(pair.B.shape()) + ", A " + to_string(pair.A.shape()) +
                             " into " + to_string(weight.shape()));
        }
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
                float acc = 0.0f;
                for (std::size_t k = 0; k < r; ++k) {
                    acc += pair.B[i * r + k] * pair.A[k * m + j];
                }
                out[i * m + j] += s * acc;
            }
        }
        return out;
    }
    throw ShapeError("merge_adapter: unsupported weight shape " + to_string(weight.shape()));
}

std::shared_ptr<const ParamSet> freeze(const ParamSet& params) {
    auto frozen = std::make_shared<ParamSet>(params);
    for (auto& [name, t] : *frozen) {
        t.set_requires_grad(false);
        t.clear_grad();
    }
    return frozen;
}

namespace {

Tensor kaiming_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed) {
    Tensor t(std::move(shape));
    const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
    Rng rng(seed);
    std::uniform_real_distribution<float> dist(-bound, bound);
    for (float& v : t.data()) {
        v = dist(rng);
    }
    return t;
}

Tensor trainable_copy(const Tensor& t) {
    Tensor c = t;
    c.clear_grad();
    c.set_requires_grad(true);
    return c;
}

}  // namespace

AdaptedModel attach_adapters(const ModelSpec& spec, std::shared_ptr<const ParamSet> base, std::size_t rank, float alpha,
                             const FreezePolicy& policy, std::uint64_t seed) {
    if (!base) {
        throw ConfigError("attach_adapters: no base parameters");
    }
    const bool any_adapters = policy.variant != FreezeVariant::none;
    if (any_adapters && rank == 0) {
        throw ConfigError("attach_adapters: rank must be >= 1");
    }
    for (const auto& [layer, on] : policy.adapter_overrides) {
        if (!spec.contains(layer)) {
            throw ConfigError("freeze policy references unknown layer '" + layer + "'");
        }
        const LayerKind kind = spec.layer(layer).kind;
        if (kind != LayerKind::conv && kind != LayerKind::fc) {
            throw ConfigError("freeze policy layer '" + layer + "' is not a conv or fc layer");
        }
    }
    for (const auto& [key, shape] : spec.param_shapes()) {
        auto it = base->find(key);
        if (it == base->end() || it->second.shape() != shape) {
            throw ConfigError("base parameters do not match model spec at '" + key + "'");
        }
    }

    AdaptedModel model(spec, std::move(base));
    model.policy_ = policy;
    model.rank_ = rank;
    model.alpha_ = alpha;

    const std::string final_fc = spec.final_fc();
    const bool norms_train = policy.variant != FreezeVariant::vanilla;
    for (const Layer& l : spec.layers()) {
        bool adapt = false;
        if (l.kind == LayerKind::conv) {
            adapt = any_adapters;
        } else if (l.kind == LayerKind::fc) {
            adapt = any_adapters && !(policy.variant == FreezeVariant::plus_norm_plus_final_fc && l.name == final_fc);
        }
        if (auto ov = policy.adapter_overrides.find(l.name); ov != policy.adapter_overrides.end()) {
            adapt = ov->second;
            if (adapt && rank == 0) {
                throw ConfigError("attach_adapters: rank must be >= 1");
            }
        }

        const ParamSet& b = *model.base_;
        if (l.kind == LayerKind::conv) {
            const std::string key = param_key(l.name, "kernel");
            if (adapt) {
                model.trainable_[param_key(l.name, "lora_B")] =
                    trainable_copy(Tensor({rank, l.in_channels, l.kernel, l.kernel}));
                Tensor a = kaiming_uniform({l.out_channels, rank, 1, 1}, rank,
                                           derive_seed({seed, hash_name(param_key(l.name, "lora_A"))}));
                model.trainable_[param_key(l.name, "lora_A")] = trainable_copy(a);
                model.adapted_.push_back(l.name);
            } else {
                model.trainable_[key] = trainable_copy(b.at(key));
            }
        } else if (l.kind == LayerKind::group_norm) {
            if (norms_train) {
                for (const char* role : {"gamma", "beta"}) {
                    model.trainable_[param_key(l.name, role)] = trainable_copy(b.at(param_key(l.name, role)));
                }
            }
        } else if (l.kind == LayerKind::fc) {
            if (adapt) {
                model.trainable_[param_key(l.name, "lora_B")] = trainable_copy(Tensor({l.in_channels, rank}));
                Tensor a = kaiming_uniform({rank, l.out_channels}, rank,
                                           derive_seed({seed, hash_name(param_key(l.name, "lora_A"))}));
                model.trainable_[param_key(l.name, "lora_A")] = trainable_copy(a);
                model.adapted_.push_back(l.name);
            } else {
                for (const char* role : {"weight", "bias"}) {
                    model.trainable_[param_key(l.name, role)] = trainable_copy(b.at(param_key(l.name, role)));
                }
            }
        }
    }
    return model;
}

AdaptedModel attach_adapters(const Network& base, std::size_t rank, float alpha, const FreezePolicy& policy,
                             std::uint64_t seed) {
    return attach_adapters(base.spec, freeze(base.params), rank, alpha, policy, seed);
}

bool AdaptedModel::is_adapted(std::string_view layer) const {
    return std::find(adapted_.begin(), adapted_.end(), layer) != adapted_.end();
}

AdapterPair AdaptedModel::adapter(std::string_view layer) const {
    if (!is_adapted(layer)) {
        throw ConfigError("layer '" + std::string(layer) + "' has no adapter");
    }
    AdapterPair pair;
    pair.B = trainable_.at(param_key(layer, "lora_B"));
    pair.A = trainable_.at(param_key(layer, "lora_A"));
    pair.rank = rank_;
    pair.alpha = alpha_;
    pair.target = std::string(layer);
    return pair;
}

const Tensor& AdaptedModel::weight_for(const std::string& key) const {
    if (auto it = trainable_.find(key); it != trainable_.end()) {
        return it->second;
    }
    return base_->at(key);
}

Var AdaptedModel::forward(Tape& tape, const Tensor& batch) {
    if (batch.rank() != 4 || Shape(batch.shape().begin() + 1, batch.shape().end()) != spec_.input_shape()) {
        throw ShapeError("batch " + to_string(batch.shape()) + " does not match model input " +
                         to_string(spec_.input_shape()));
    }
    const float s = adapted_.empty() ? 0.0f : alpha_ / static_cast<float>(rank_);
    auto leaf = [&](const std::string& key) -> Var {
        if (auto it = trainable_.find(key); it != trainable_.end()) {
            return tape.parameter(it->second);
        }
        return tape.constant_ref(base_->at(key));
    };
    LayerHooks hooks;
    hooks.conv = [&](const Layer& l, Var x) {
        if (is_adapted(l.name)) {
            return adapter_forward(x, tape.constant_ref(base_->at(param_key(l.name, "kernel"))),
                                   leaf(param_key(l.name, "lora_B")), leaf(param_key(l.name, "lora_A")), s, l.stride,
                                   l.padding);
        }
        return conv2d(x, leaf(param_key(l.name, "kernel")), l.stride, l.padding);
    };
    hooks.group_norm = [&](const Layer& l, Var x) {
        return group_norm(x, l.groups, leaf(param_key(l.name, "gamma")), leaf(param_key(l.name, "beta")));
    };
    hooks.fc = [&](const Layer& l, Var x) {
        const Var w = leaf(param_key(l.name, "weight"));
        const Var b = leaf(param_key(l.name, "bias"));
        if (is_adapted(l.name)) {
            return adapter_linear(x, w, b, leaf(param_key(l.name, "lora_B")), leaf(param_key(l.name, "lora_A")), s);
        }
        return linear(x, w, b);
    };
    return run_layers(spec_, tape.constant(batch), hooks);
}

std::size_t AdaptedModel::count_parameters(ParamFilter filter) const {
    if (filter == ParamFilter::trainable) {
        return flocora::count_parameters(trainable_, ParamFilter::all);
    }
    std::size_t total = flocora::count_parameters(*base_, ParamFilter::all);
    for (const auto& [key, t] : trainable_) {
        if (!base_->contains(key)) {
            total += t.size();
        }
    }
    return total;
}

void AdaptedModel::load_trainables(const ParamSet& values) {
    if (values.size() != trainable_.size()) {
        throw ProtocolError("expected " + std::to_string(trainable_.size()) + " trainable tensors, got " +
                            std::to_string(values.size()));
    }
    for (auto& [key, t] : trainable_) {
        auto it = values.find(key);
        if (it == values.end()) {
            throw ProtocolError("missing trainable tensor '" + key + "'");
        }
        if (it->second.shape() != t.shape()) {
            throw ProtocolError("tensor '" + key + "' has shape " + to_string(it->second.shape()) + ", expected " +
                                to_string(t.shape()));
        }
        std::copy(it->second.data().begin(), it->second.data().end(), t.data().begin());
        t.clear_grad();
    }
}

ParamSet AdaptedModel::merged() const {
    ParamSet out;
    for (const auto& [key, shape] : spec_.param_shapes()) {
        Tensor t = weight_for(key);
        t.clear_grad();
        t.set_requires_grad(false);
        out.emplace(key, std::move(t));
    }
    for (const std::string& layer : adapted_) {
        const std::string key = spec_.layer(layer).kind == LayerKind::conv ? param_key(layer, "kernel")
                                                                            : param_key(layer, "weight");
        out[key] = merge_adapter(base_->at(key), adapter(layer));
    }
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> trainable_tensors(const AdaptedModel& model) {
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(model.trainable().size());
    for (const auto& [key, t] : model.trainable()) {
        out.emplace_back(key, &t);
    }
    return out;
}

}  // namespace flocora
