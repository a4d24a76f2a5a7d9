// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "flocora/autograd.hpp"
#include "flocora/model.hpp"

namespace flocora {

/// Which parts of the network train, from least to most.
///   none                     every tensor trains directly (plain FedAvg)
///   vanilla                  adapters on every conv and on the final FC; the rest frozen
///   plus_norm                vanilla + group-norm gamma/beta trainable
///   plus_norm_plus_final_fc  adapters on convs; norms and the final FC train directly
enum class FreezeVariant { none, vanilla, plus_norm, plus_norm_plus_final_fc };

std::string_view to_string(FreezeVariant v);
FreezeVariant parse_freeze_variant(std::string_view s);

struct FreezePolicy {
    FreezeVariant variant = FreezeVariant::plus_norm_plus_final_fc;
    /// Per-layer adapter switch applied on top of the variant. A layer
    /// switched off trains its weights directly instead.
    std::map<std::string, bool> adapter_overrides;
};

/// Low-rank factors for one layer. For a conv with kernel [O,I,K,K], B is
/// [r,I,K,K] (an r-channel KxK conv) and A is [O,r,1,1] (a 1x1 conv). For an
/// FC weight [D,M], B is [D,r] and A is [r,M].
struct AdapterPair {
    Tensor B;
    Tensor A;
    std::size_t rank = 0;
    float alpha = 0.0f;
    std::string target;

    float scaling() const { return alpha / static_cast<float>(rank); }
};

/// conv(x, W) + scaling * conv1x1(conv(x, B), A). The B conv reuses the
/// base stride and padding.
Var adapter_forward(Var input, Var kernel, Var lora_b, Var lora_a, float scaling, std::size_t stride,
                    std::size_t padding);
/// x W + bias + scaling * (x B) A.
Var adapter_linear(Var input, Var weight, Var bias, Var lora_b, Var lora_a, float scaling);

/// Folds the adapter into the base weight: W + (alpha/r) * A.B for convs,
/// W + (alpha/r) * B.A for FC weights.
Tensor merge_adapter(const Tensor& weight, const AdapterPair& pair);

/// A network whose randomly initialised base weights stay frozen, shared
/// read-only between every copy, with a separately owned set of trainable
/// tensors (adapters plus whatever the policy unfreezes).
class AdaptedModel {
public:
    const ModelSpec& spec() const { return spec_; }
    const ParamSet& base() const { return *base_; }
    const std::shared_ptr<const ParamSet>& shared_base() const { return base_; }
    ParamSet& trainable() { return trainable_; }
    const ParamSet& trainable() const { return trainable_; }
    const FreezePolicy& policy() const { return policy_; }
    std::size_t rank() const { return rank_; }
    float alpha() const { return alpha_; }

    bool is_adapted(std::string_view layer) const;
    const std::vector<std::string>& adapted_layers() const { return adapted_; }
    AdapterPair adapter(std::string_view layer) const;

    Var forward(Tape& tape, const Tensor& batch);

    /// all: base tensors plus adapters; trainable: the trainable set only.
    std::size_t count_parameters(ParamFilter filter) const;

    /// Replaces trainable values. Names and shapes must match exactly.
    void load_trainables(const ParamSet& values);

    /// Plain-network parameters equivalent to this model (adapters merged).
    ParamSet merged() const;

private:
    friend AdaptedModel attach_adapters(const ModelSpec&, std::shared_ptr<const ParamSet>, std::size_t, float,
                                        const FreezePolicy&, std::uint64_t);

    AdaptedModel(ModelSpec spec, std::shared_ptr<const ParamSet> base) : spec_(std::move(spec)), base_(std::move(base)) {}

    const Tensor& weight_for(const std::string& key) const;

    ModelSpec spec_;
    std::shared_ptr<const ParamSet> base_;
    ParamSet trainable_;
    FreezePolicy policy_;
    std::size_t rank_ = 0;
    float alpha_ = 0.0f;
    std::vector<std::string> adapted_;
};

/// Freezes `base` and attaches adapters according to `policy`. B starts at
/// zero and A is Kaiming-uniform, so the adapted model initially computes the
/// base model exactly. The base is shared, not copied.
AdaptedModel attach_adapters(const ModelSpec& spec, std::shared_ptr<const ParamSet> base, std::size_t rank, float alpha,
                             const FreezePolicy& policy, std::uint64_t seed);
AdaptedModel attach_adapters(const Network& base, std::size_t rank, float alpha, const FreezePolicy& policy,
                             std::uint64_t seed);

/// Frozen copy of a parameter set, suitable for sharing between clients.
std::shared_ptr<const ParamSet> freeze(const ParamSet& params);

/// Trainable tensors in deterministic (name) order.
std::vector<std::pair<std::string, const Tensor*>> trainable_tensors(const AdaptedModel& model);
std::vector<std::pair<std::string, const Tensor*>> trainable_tensors(AdaptedModel&&) = delete;

}  // namespace flocora
