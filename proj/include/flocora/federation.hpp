// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "flocora/dataset.hpp"
#include "flocora/lora.hpp"
#include "flocora/model.hpp"
#include "flocora/partition.hpp"
#include "flocora/wire.hpp"

namespace flocora {

struct FederationConfig {
    std::size_t num_clients = 100;
    double sample_fraction = 0.1;
    std::size_t rounds = 100;
    std::size_t local_epochs = 5;
    std::size_t batch_size = 32;
    float lr = 0.01f;
    float momentum = 0.9f;
    std::size_t rank = 32;
    float alpha = 512.0f;
    /// FreezeVariant::none runs plain FedAvg on the full model.
    FreezeVariant freeze = FreezeVariant::plus_norm_plus_final_fc;
    /// 0 = fp32 messages; 2, 4 or 8 quantizes both directions.
    int quant_bits = 0;
    std::uint64_t seed = 0;
    /// Local training workers per round; results do not depend on it.
    std::size_t parallel_clients = 1;

    void validate() const;
};

struct ClientUpdate {
    std::size_t client = 0;
    std::size_t num_examples = 0;
    ParamSet tensors;
    double train_loss = 0.0;
    std::size_t steps = 0;
};

struct RoundReport {
    std::size_t round = 0;
    std::vector<std::size_t> sampled;
    double test_accuracy = 0.0;
    double test_loss = 0.0;
    /// n_i-weighted mean of the sampled clients' local training loss.
    double train_loss = 0.0;
    std::uint64_t uplink_bytes = 0;
    std::uint64_t downlink_bytes = 0;
    std::uint64_t cumulative_tcc = 0;
    double wall_seconds = 0.0;
};

struct Evaluation {
    double accuracy = 0.0;
    double loss = 0.0;
};

/// round(C * fraction) distinct client ids (at least one), uniform without
/// replacement, deterministic in (seed, round). Returned sorted.
std::vector<std::size_t> sample_clients(std::size_t round, const FederationConfig& cfg);

/// Seed of a client's private stream in a given round.
std::uint64_t client_stream_seed(std::uint64_t master_seed, std::size_t client, std::size_t round);

/// Weighted mean sum_k (n_k / n) u_k, n = sum_k n_k, reduced in client-id
/// order. Throws ProtocolError when the updates are not congruent.
ParamSet aggregate(std::span<const ClientUpdate> updates);

Evaluation evaluate(AdaptedModel& model, const Dataset& data, std::size_t batch_size = 500);

/// One simulated federation. Datasets must outlive the object.
class Federation {
public:
    Federation(FederationConfig cfg, const Network& base, const Dataset& train, const Dataset& test,
               PartitionMap partition);

    const FederationConfig& config() const { return cfg_; }
    const PartitionMap& partition() const { return partition_; }
    const ParamSet& global() const { return global_; }
    /// Template model holding the current global trainables.
    const AdaptedModel& global_model() const { return model_; }
    const CostLedger& ledger() const { return ledger_; }

    /// Client-side work for one round: load the received trainables (the
    /// base stays frozen), run local_epochs of minibatch SGD with momentum
    /// (fresh momentum every round) and return the new trainables.
    ClientUpdate local_train(std::size_t client, const ParamSet& received, std::size_t round) const;

    /// Broadcast, local training, upload and aggregation for round `round`
    /// (1-based), followed by evaluation of the new global model.
    RoundReport run_round(std::size_t round);
    /// Rounds 1..cfg.rounds.
    std::vector<RoundReport> run();

private:
    FederationConfig cfg_;
    const Dataset& train_;
    const Dataset& test_;
    PartitionMap partition_;
    AdaptedModel model_;
    ParamSet global_;
    CostLedger ledger_;
};

std::vector<RoundReport> run_experiment(const FederationConfig& cfg, const Network& base, const Dataset& train,
                                        const Dataset& test, const PartitionMap& partition);

}  // namespace flocora
