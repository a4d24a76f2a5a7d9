// SPDX-License-Identifier: Apache-2.0

#include "flocora/partition.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <string>

#include <json.hpp>

#include "flocora/error.hpp"
#include "flocora/random.hpp"

namespace flocora {

namespace {

constexpr int kMaxDraws = 100;

std::vector<double> dirichlet(std::size_t k, double alpha, Rng& rng) {
    std::gamma_distribution<double> gamma(alpha, 1.0);
    std::vector<double> p(k);
    for (int attempt = 0; attempt < kMaxDraws; ++attempt) {
        double total = 0.0;
        for (double& v : p) {
            v = gamma(rng);
            total += v;
        }
        if (total > 0.0 && std::isfinite(total)) {
            for (double& v : p) {
                v /= total;
            }
            return p;
        }
    }
    // Every gamma draw underflowed: the limit of alpha -> 0 puts all mass on one client.
    std::fill(p.begin(), p.end(), 0.0);
    p[std::uniform_int_distribution<std::size_t>(0, k - 1)(rng)] = 1.0;
    return p;
}

std::vector<std::size_t> largest_remainder(std::size_t total, const std::vector<double>& shares) {
    std::vector<std::size_t> counts(shares.size());
    std::vector<std::pair<double, std::size_t>> rest(shares.size());
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < shares.size(); ++i) {
        const double exact = static_cast<double>(total) * shares[i];
        counts[i] = static_cast<std::size_t>(std::floor(exact));
        assigned += counts[i];
        rest[i] = {exact - static_cast<double>(counts[i]), i};
    }
    std::stable_sort(rest.begin(), rest.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < total; ++i, ++assigned) {
        ++counts[rest[i % rest.size()].second];
    }
    return counts;
}

std::vector<std::vector<std::size_t>> draw(const std::vector<std::vector<std::size_t>>& by_class, std::size_t clients,
                                           double alpha, Rng& rng) {
    std::vector<std::vector<std::size_t>> out(clients);
    for (const auto& members : by_class) {
        if (members.empty()) {
            continue;
        }
        std::vector<std::size_t> shuffled = members;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        const std::vector<std::size_t> counts = largest_remainder(shuffled.size(), dirichlet(clients, alpha, rng));
        std::size_t pos = 0;
        for (std::size_t c = 0; c < clients; ++c) {
            out[c].insert(out[c].end(), shuffled.begin() + static_cast<std::ptrdiff_t>(pos),
                          shuffled.begin() + static_cast<std::ptrdiff_t>(pos + counts[c]));
            pos += counts[c];
        }
    }
    return out;
}

}  // namespace

PartitionMap lda_partition(std::span<const int> labels, std::size_t num_clients, double alpha, std::uint64_t seed) {
    if (!(alpha > 0.0)) {
        throw ConfigError("Dirichlet concentration must be positive");
    }
    if (num_clients == 0) {
        throw ConfigError("need at least one client");
    }
    if (labels.size() < num_clients) {
        throw ConfigError("cannot give " + std::to_string(num_clients) + " clients at least one of " +
                          std::to_string(labels.size()) + " examples");
    }
    int max_label = 0;
    for (int y : labels) {
        if (y < 0) {
            throw ConfigError("negative label in partition input");
        }
        max_label = std::max(max_label, y);
    }
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(max_label) + 1);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        by_class[static_cast<std::size_t>(labels[i])].push_back(i);
    }

    Rng rng(derive_seed({seed, 0x6c6461ULL}));
    std::vector<std::vector<std::size_t>> clients;
    for (int attempt = 0; attempt < kMaxDraws; ++attempt) {
        clients = draw(by_class, num_clients, alpha, rng);
        if (std::none_of(clients.begin(), clients.end(), [](const auto& c) { return c.empty(); })) {
            break;
        }
    }
    // Still empty after the retries (tiny alpha, many clients): hand each empty
    // client the last example of the currently largest client.
    for (auto& c : clients) {
        if (c.empty()) {
            auto largest = std::max_element(clients.begin(), clients.end(),
                                            [](const auto& a, const auto& b) { return a.size() < b.size(); });
            c.push_back(largest->back());
            largest->pop_back();
        }
    }
    for (auto& c : clients) {
        std::sort(c.begin(), c.end());
    }
    PartitionMap map;
    map.clients = std::move(clients);
    map.dirichlet_alpha = alpha;
    map.seed = seed;
    map.num_examples = labels.size();
    return map;
}

std::vector<std::vector<std::size_t>> class_histogram(const PartitionMap& map, std::span<const int> labels,
                                                      std::size_t num_classes) {
    std::vector<std::vector<std::size_t>> counts(map.num_clients(), std::vector<std::size_t>(num_classes, 0));
    for (std::size_t c = 0; c < map.num_clients(); ++c) {
        for (std::size_t idx : map.clients[c]) {
            const int y = labels[idx];
            if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
                throw ConfigError("label " + std::to_string(y) + " outside histogram range");
            }
            ++counts[c][static_cast<std::size_t>(y)];
        }
    }
    return counts;
}

double mean_label_entropy(const PartitionMap& map, std::span<const int> labels, std::size_t num_classes) {
    const auto hist = class_histogram(map, labels, num_classes);
    double total = 0.0;
    for (const auto& row : hist) {
        const double n = static_cast<double>(std::accumulate(row.begin(), row.end(), std::size_t{0}));
        double h = 0.0;
        for (std::size_t k : row) {
            if (k > 0) {
                const double p = static_cast<double>(k) / n;
                h -= p * std::log(p);
            }
        }
        total += h;
    }
    return hist.empty() ? 0.0 : total / static_cast<double>(hist.size());
}

void save_partition(const PartitionMap& map, const std::filesystem::path& file) {
    nlohmann::json j;
    j["format"] = "flocora-partition";
    j["version"] = 1;
    j["dirichlet_alpha"] = map.dirichlet_alpha;
    j["seed"] = map.seed;
    j["num_examples"] = map.num_examples;
    j["clients"] = map.clients;
    std::ofstream out(file);
    if (!out) {
        throw FormatError("cannot write partition file " + file.string());
    }
    out << j.dump() << '\n';
}

PartitionMap load_partition(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) {
        throw FormatError("cannot open partition file " + file.string());
    }
    try {
        const nlohmann::json j = nlohmann::json::parse(in);
        if (j.at("format") != "flocora-partition" || j.at("version") != 1) {
            throw FormatError("unrecognised partition file " + file.string());
        }
        PartitionMap map;
        map.dirichlet_alpha = j.at("dirichlet_alpha").get<double>();
        map.seed = j.at("seed").get<std::uint64_t>();
        map.num_examples = j.at("num_examples").get<std::size_t>();
        map.clients = j.at("clients").get<std::vector<std::vector<std::size_t>>>();
        return map;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed partition file " + file.string() + ": " + e.what());
    }
}

}  // namespace flocora
