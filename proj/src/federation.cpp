// SPDX-License-Identifier: Apache-2.0

#include "flocora/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

#include "flocora/error.hpp"
#include "flocora/optim.hpp"
#include "flocora/random.hpp"

namespace flocora {

void FederationConfig::validate() const {
    if (num_clients == 0) {
        throw ConfigError("num_clients must be >= 1");
    }
    if (!(sample_fraction > 0.0 && sample_fraction <= 1.0)) {
        throw ConfigError("sample_fraction must be in (0, 1]");
    }
    if (local_epochs == 0 || batch_size == 0) {
        throw ConfigError("local_epochs and batch_size must be >= 1");
    }
    if (!(lr >= 0.0f) || !(momentum >= 0.0f && momentum < 1.0f)) {
        throw ConfigError("need lr >= 0 and 0 <= momentum < 1");
    }
    if (freeze != FreezeVariant::none && rank == 0) {
        throw ConfigError("rank must be >= 1 when adapters are used");
    }
    if (quant_bits != 0 && !is_supported_bit_width(quant_bits)) {
        throw ConfigError("quant_bits must be 0, 2, 4 or 8");
    }
    if (parallel_clients == 0) {
        throw ConfigError("parallel_clients must be >= 1");
    }
}

std::vector<std::size_t> sample_clients(std::size_t round, const FederationConfig& cfg) {
    const std::size_t count = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(static_cast<double>(cfg.num_clients) * cfg.sample_fraction)), 1,
        cfg.num_clients);
    std::vector<std::size_t> ids(cfg.num_clients);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    Rng rng(derive_seed({cfg.seed, 0x73616d706c65ULL, round}));
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, cfg.num_clients - 1);
        std::swap(ids[i], ids[pick(rng)]);
    }
    ids.resize(count);
    std::sort(ids.begin(), ids.end());
    return ids;
}

std::uint64_t client_stream_seed(std::uint64_t master_seed, std::size_t client, std::size_t round) {
    return derive_seed({master_seed, 0x636c69656e74ULL, client, round});
}

ParamSet aggregate(std::span<const ClientUpdate> updates) {
    if (updates.empty()) {
        throw ProtocolError("aggregate needs at least one update");
    }
    std::vector<const ClientUpdate*> ordered;
    for (const ClientUpdate& u : updates) {
        ordered.push_back(&u);
    }
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const ClientUpdate* a, const ClientUpdate* b) { return a->client < b->client; });

    double total = 0.0;
    for (const ClientUpdate* u : ordered) {
        total += static_cast<double>(u->num_examples);
    }
    if (!(total > 0.0)) {
        throw ProtocolError("aggregate: updates carry no examples");
    }

    const ParamSet& ref = ordered.front()->tensors;
    for (const ClientUpdate* u : ordered) {
        if (u->tensors.size() != ref.size()) {
            throw ProtocolError("client " + std::to_string(u->client) + " sent " + std::to_string(u->tensors.size()) +
                                " tensors, expected " + std::to_string(ref.size()));
        }
        for (const auto& [name, t] : ref) {
            auto it = u->tensors.find(name);
            if (it == u->tensors.end() || it->second.shape() != t.shape()) {
                throw ProtocolError("client " + std::to_string(u->client) + " update is not congruent at '" + name +
                                    "'");
            }
        }
    }

    ParamSet out;
    for (const auto& [name, t] : ref) {
        std::vector<double> acc(t.size(), 0.0);
        for (const ClientUpdate* u : ordered) {
            const double w = static_cast<double>(u->num_examples) / total;
            const std::span<const float> v = u->tensors.at(name).data();
            for (std::size_t i = 0; i < acc.size(); ++i) {
                acc[i] += w * static_cast<double>(v[i]);
            }
        }
        Tensor mean(t.shape());
        for (std::size_t i = 0; i < acc.size(); ++i) {
            mean[i] = static_cast<float>(acc[i]);
        }
        mean.set_requires_grad(t.requires_grad());
        out.emplace(name, std::move(mean));
    }
    return out;
}

Evaluation evaluate(AdaptedModel& model, const Dataset& data, std::size_t batch_size) {
    if (data.size() == 0) {
        return {};
    }
    std::size_t correct = 0;
    double loss_sum = 0.0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t end = std::min(data.size(), start + batch_size);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        Tape tape(false);
        const Var logits = model.forward(tape, data.batch(idx));
        const std::vector<int> labels = data.batch_labels(idx);
        const Var loss = softmax_cross_entropy(logits, labels);
        loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(idx.size());
        const Tensor& z = logits.value();
        const std::size_t k = z.dim(1);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto row = z.data().subspan(i * k, k);
            const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
            correct += best == labels[i] ? 1 : 0;
        }
    }
    const double n = static_cast<double>(data.size());
    return {static_cast<double>(correct) / n, loss_sum / n};
}

namespace {
AdaptedModel make_model(const FederationConfig& cfg, const Network& base) {
    cfg.validate();
    FreezePolicy policy;
    policy.variant = cfg.freeze;
    return attach_adapters(base, cfg.rank, cfg.alpha, policy, derive_seed({cfg.seed, 0x6c6f7261ULL}));
}
}  // namespace

Federation::Federation(FederationConfig cfg, const Network& base, const Dataset& train, const Dataset& test,
                       PartitionMap partition)
    : cfg_(cfg), train_(train), test_(test), partition_(std::move(partition)), model_(make_model(cfg, base)) {
    if (partition_.num_clients() != cfg_.num_clients) {
        throw ConfigError("partition has " + std::to_string(partition_.num_clients()) + " clients, config expects " +
                          std::to_string(cfg_.num_clients));
    }
    for (const auto& c : partition_.clients) {
        for (std::size_t i : c) {
            if (i >= train_.size()) {
                throw ConfigError("partition index " + std::to_string(i) + " outside the training set");
            }
        }
    }
    global_ = model_.trainable();
}

ClientUpdate Federation::local_train(std::size_t client, const ParamSet& received, std::size_t round) const {
    const std::vector<std::size_t>& mine = partition_.clients.at(client);
    if (mine.empty()) {
        throw ConfigError("client " + std::to_string(client) + " has no data");
    }
    AdaptedModel model = model_;
    model.load_trainables(received);
    SgdMomentum opt(cfg_.lr, cfg_.momentum);
    Rng rng(client_stream_seed(cfg_.seed, client, round));

    std::vector<std::size_t> order = mine;
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t epoch = 0; epoch < cfg_.local_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
            const std::span<const std::size_t> idx(order.data() + start, end - start);
            Tape tape;
            const Var logits = model.forward(tape, train_.batch(idx));
            const std::vector<int> labels = train_.batch_labels(idx);
            const Var loss = softmax_cross_entropy(logits, labels);
            tape.backward(loss);
            opt.step(model.trainable());
            loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(idx.size());
            seen += idx.size();
        }
    }

    ClientUpdate u;
    u.client = client;
    u.num_examples = mine.size();
    u.tensors = model.trainable();
    for (auto& [name, t] : u.tensors) {
        t.clear_grad();
    }
    u.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    u.steps = opt.steps_taken();
    return u;
}

RoundReport Federation::run_round(std::size_t round) {
    const auto t0 = std::chrono::steady_clock::now();
    RoundReport rep;
    rep.round = round;
    rep.sampled = sample_clients(round, cfg_);
    const auto r32 = static_cast<std::uint32_t>(round);

    // Steps 1: broadcast. Every sampled client receives the same bytes.
    const std::vector<std::uint8_t> down = serialize(encode_update(r32, kServerSender, global_, cfg_.quant_bits));
    const ParamSet received = decode_update(deserialize(down));

    // Steps 2-3: local training and upload.
    const std::size_t k = rep.sampled.size();
    std::vector<ClientUpdate> updates(k);
    std::vector<std::size_t> up_bytes(k, 0);
    auto work = [&](std::size_t slot) {
        const std::size_t client = rep.sampled[slot];
        ClientUpdate u = local_train(client, received, round);
        const std::vector<std::uint8_t> up =
            serialize(encode_update(r32, static_cast<std::uint32_t>(client), u.tensors, cfg_.quant_bits));
        up_bytes[slot] = up.size();
        u.tensors = decode_update(deserialize(up));
        updates[slot] = std::move(u);
    };
    const std::size_t workers = std::min(cfg_.parallel_clients, k);
    if (workers <= 1) {
        for (std::size_t s = 0; s < k; ++s) {
            work(s);
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(workers);
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t s = next++; s < k; s = next++) {
                        work(s);
                    }
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) {
            t.join();
        }
        for (const auto& e : errors) {
            if (e) {
                std::rethrow_exception(e);
            }
        }
    }

    // Step 4: aggregation barrier.
    global_ = aggregate(updates);
    model_.load_trainables(global_);

    double weighted_loss = 0.0;
    double n = 0.0;
    for (std::size_t s = 0; s < k; ++s) {
        ledger_.record(r32, static_cast<std::uint32_t>(rep.sampled[s]), up_bytes[s], down.size());
        rep.uplink_bytes += up_bytes[s];
        rep.downlink_bytes += down.size();
        weighted_loss += updates[s].train_loss * static_cast<double>(updates[s].num_examples);
        n += static_cast<double>(updates[s].num_examples);
    }
    rep.train_loss = weighted_loss / n;
    rep.cumulative_tcc = ledger_.total();

    const Evaluation ev = evaluate(model_, test_);
    rep.test_accuracy = ev.accuracy;
    rep.test_loss = ev.loss;
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

std::vector<RoundReport> Federation::run() {
    std::vector<RoundReport> out;
    out.reserve(cfg_.rounds);
    for (std::size_t r = 1; r <= cfg_.rounds; ++r) {
        out.push_back(run_round(r));
    }
    return out;
}

std::vector<RoundReport> run_experiment(const FederationConfig& cfg, const Network& base, const Dataset& train,
                                        const Dataset& test, const PartitionMap& partition) {
    Federation fed(cfg, base, train, test, partition);
    return fed.run();
}

}  // namespace flocora
