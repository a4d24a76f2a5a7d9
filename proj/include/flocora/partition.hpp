// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace flocora {

/// Disjoint assignment of dataset indices to clients; each list is sorted.
struct PartitionMap {
    std::vector<std::vector<std::size_t>> clients;
    double dirichlet_alpha = 0.0;
    std::uint64_t seed = 0;
    std::size_t num_examples = 0;

    std::size_t num_clients() const { return clients.size(); }
    std::size_t client_size(std::size_t client) const { return clients.at(client).size(); }

    bool operator==(const PartitionMap&) const = default;
};

/// Label-skewed split: for every class, client shares are drawn from
/// Dirichlet(alpha, ..., alpha) and that class's (shuffled) examples are dealt
/// out with largest-remainder rounding. Draws leaving a client empty are
/// retried; deterministic in (labels, num_clients, alpha, seed).
PartitionMap lda_partition(std::span<const int> labels, std::size_t num_clients, double alpha, std::uint64_t seed);

/// counts[client][class].
std::vector<std::vector<std::size_t>> class_histogram(const PartitionMap& map, std::span<const int> labels,
                                                      std::size_t num_classes);

/// Average over clients of the Shannon entropy (nats) of the client's label
/// distribution.
double mean_label_entropy(const PartitionMap& map, std::span<const int> labels, std::size_t num_classes);

void save_partition(const PartitionMap& map, const std::filesystem::path& file);
PartitionMap load_partition(const std::filesystem::path& file);

}  // namespace flocora
