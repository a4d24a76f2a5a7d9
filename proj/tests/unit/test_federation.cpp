// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "flocora/error.hpp"
#include "flocora/federation.hpp"
#include "flocora/optim.hpp"
#include "flocora/random.hpp"
#include "oracles.hpp"

using namespace flocora;
using namespace flocora::testing;

namespace {

ClientUpdate scalar_update(std::size_t client, std::size_t n, float v) {
    ClientUpdate u;
    u.client = client;
    u.num_examples = n;
    u.tensors.emplace("w", Tensor({1}, v));
    return u;
}

struct Toy {
    Dataset train;
    Dataset test;
    Network net;
};

Toy toy(std::size_t per_class = 24) {
    SyntheticSpec s;
    s.example_shape = {3, 8, 8};
    s.noise = 0.5f;
    s.seed = 5;
    return {synthetic_dataset(s, per_class, 1), synthetic_dataset(s, 10, 2), build_tiny(3, 1, {3, 8, 8})};
}

FederationConfig toy_config() {
    FederationConfig cfg;
    cfg.num_clients = 4;
    cfg.sample_fraction = 0.5;
    cfg.rounds = 3;
    cfg.local_epochs = 1;
    cfg.batch_size = 8;
    cfg.lr = 0.05f;
    cfg.rank = 4;
    cfg.alpha = 8.0f;
    cfg.seed = 9;
    return cfg;
}

}  // namespace

TEST(Sampling, FullFractionTakesEveryone) {
    FederationConfig cfg;
    cfg.num_clients = 7;
    cfg.sample_fraction = 1.0;
    EXPECT_EQ(sample_clients(3, cfg), (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6}));
}

TEST(Sampling, TenOfHundred) {
    FederationConfig cfg;
    for (std::size_t round = 1; round <= 50; ++round) {
        const auto ids = sample_clients(round, cfg);
        EXPECT_EQ(ids.size(), 10u);
        EXPECT_EQ(std::set<std::size_t>(ids.begin(), ids.end()).size(), 10u);
        EXPECT_LT(ids.back(), 100u);
        EXPECT_EQ(ids, sample_clients(round, cfg));
    }
    EXPECT_NE(sample_clients(1, cfg), sample_clients(2, cfg));
}

TEST(Aggregate, IdenticalUpdatesAreAFixedPoint) {
    std::mt19937_64 rng(1);
    const Tensor t = random_tensor({3, 2}, rng);
    std::vector<ClientUpdate> ups(3);
    for (std::size_t k = 0; k < 3; ++k) {
        ups[k].client = k;
        ups[k].num_examples = k + 1;
        ups[k].tensors.emplace("t", t);
    }
    EXPECT_TRUE(bit_equal(aggregate(ups).at("t"), t));
}

TEST(Aggregate, OppositeUpdatesCancel) {
    const std::vector<ClientUpdate> ups{scalar_update(0, 5, 1.7f), scalar_update(1, 5, -1.7f)};
    EXPECT_EQ(aggregate(ups).at("w")[0], 0.0f);
}

TEST(Aggregate, HandComputedWeightedMean) {
    const std::vector<ClientUpdate> ups{scalar_update(0, 1, 6.0f), scalar_update(1, 2, 3.0f),
                                        scalar_update(2, 3, 1.0f)};
    EXPECT_FLOAT_EQ(aggregate(ups).at("w")[0], 2.5f);
}

TEST(Aggregate, MatchesFp64BruteForce) {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<std::size_t> count(1, 10), n(1, 500);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t k = count(rng);
        std::vector<ClientUpdate> ups(k);
        for (std::size_t i = 0; i < k; ++i) {
            ups[i].client = 100 - i;
            ups[i].num_examples = n(rng);
            ups[i].tensors.emplace("a", random_tensor({4, 3}, rng, -5.0f, 5.0f));
            ups[i].tensors.emplace("b", random_tensor({7}, rng));
        }
        const ParamSet got = aggregate(ups);
        for (const char* name : {"a", "b"}) {
            const std::size_t len = ups[0].tensors.at(name).size();
            for (std::size_t j = 0; j < len; ++j) {
                double num = 0.0, den = 0.0;
                for (const auto& u : ups) {
                    num += static_cast<double>(u.num_examples) * static_cast<double>(u.tensors.at(name)[j]);
                    den += static_cast<double>(u.num_examples);
                }
                const double want = num / den;
                ASSERT_LE(std::abs(got.at(name)[j] - want), 1e-6 * std::max(std::abs(want), 1e-3))
                    << trial << " " << name << "[" << j << "]";
            }
        }
    }
}

TEST(Aggregate, LinearInUpdates) {
    std::mt19937_64 rng(3);
    std::vector<ClientUpdate> ups(4), scaled(4);
    for (std::size_t i = 0; i < 4; ++i) {
        ups[i].client = i;
        ups[i].num_examples = 10 * (i + 1);
        ups[i].tensors.emplace("t", random_tensor({16}, rng));
        scaled[i] = ups[i];
        for (float& v : scaled[i].tensors.at("t").data()) {
            v *= 4.0f;
        }
    }
    const Tensor a = aggregate(ups).at("t"), b = aggregate(scaled).at("t");
    for (std::size_t j = 0; j < a.size(); ++j) {
        EXPECT_FLOAT_EQ(b[j], 4.0f * a[j]);
    }
}

TEST(Aggregate, IndependentOfArrivalOrder) {
    std::mt19937_64 rng(4);
    std::vector<ClientUpdate> ups(6);
    for (std::size_t i = 0; i < 6; ++i) {
        ups[i].client = i * 3;
        ups[i].num_examples = i + 2;
        ups[i].tensors.emplace("t", random_tensor({9}, rng));
    }
    const Tensor want = aggregate(ups).at("t");
    for (int trial = 0; trial < 10; ++trial) {
        std::shuffle(ups.begin(), ups.end(), rng);
        EXPECT_TRUE(bit_equal(aggregate(ups).at("t"), want));
    }
}

TEST(Aggregate, RejectsIncongruentSets) {
    EXPECT_THROW(aggregate(std::vector<ClientUpdate>{}), ProtocolError);
    ClientUpdate a = scalar_update(0, 1, 1.0f), b = scalar_update(1, 1, 1.0f);
    b.tensors.at("w") = Tensor({2});
    EXPECT_THROW(aggregate(std::vector<ClientUpdate>{a, b}), ProtocolError);
    b = scalar_update(1, 1, 1.0f);
    b.tensors.emplace("extra", Tensor({1}));
    EXPECT_THROW(aggregate(std::vector<ClientUpdate>{a, b}), ProtocolError);
}

TEST(LocalTrain, ZeroLearningRateReturnsReceived) {
    Toy t = toy();
    FederationConfig cfg = toy_config();
    cfg.lr = 0.0f;
    Federation fed(cfg, t.net, t.train, t.test, lda_partition(t.train.labels, cfg.num_clients, 0.5, 1));
    ParamSet received = fed.global();
    std::mt19937_64 rng(5);
    for (auto& [name, tensor] : received) {
        tensor = random_tensor(tensor.shape(), rng);
        tensor.set_requires_grad(true);
    }
    const ClientUpdate u = fed.local_train(2, received, 4);
    for (const auto& [name, tensor] : received) {
        EXPECT_TRUE(bit_equal(u.tensors.at(name), tensor)) << name;
    }
}

TEST(LocalTrain, StepCountFollowsBatching) {
    Toy t = toy(64);
    FederationConfig cfg = toy_config();
    cfg.num_clients = 3;
    cfg.local_epochs = 5;
    cfg.batch_size = 32;
    PartitionMap p;
    p.num_examples = t.train.size();
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < 64; ++i) {
            p.clients.resize(3);
            p.clients[c].push_back(c * 64 + i);
        }
    }
    Federation fed(cfg, t.net, t.train, t.test, p);
    EXPECT_EQ(fed.local_train(1, fed.global(), 1).steps, 10u);
    cfg.batch_size = 30;  // 64 = 30 + 30 + 4
    Federation fed2(cfg, t.net, t.train, t.test, p);
    EXPECT_EQ(fed2.local_train(1, fed2.global(), 1).steps, 15u);
}

TEST(Federation, SingleClientEqualsCentralizedTraining) {
    Toy t = toy();
    FederationConfig cfg = toy_config();
    cfg.num_clients = 1;
    cfg.sample_fraction = 1.0;
    cfg.local_epochs = 3;
    PartitionMap p = lda_partition(t.train.labels, 1, 0.5, 0);
    Federation fed(cfg, t.net, t.train, t.test, p);

    // Independent centralized loop over the same data, same initial
    // trainables, same shuffling stream.
    AdaptedModel central = attach_adapters(t.net, cfg.rank, cfg.alpha, FreezePolicy{cfg.freeze, {}}, 12345);
    central.load_trainables(fed.global());
    SgdMomentum opt(cfg.lr, cfg.momentum);
    Rng rng(client_stream_seed(cfg.seed, 0, 1));
    std::vector<std::size_t> order(t.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
            const std::span<const std::size_t> idx(order.data() + s, std::min(cfg.batch_size, order.size() - s));
            Tape tape;
            tape.backward(softmax_cross_entropy(central.forward(tape, t.train.batch(idx)), t.train.batch_labels(idx)));
            opt.step(central.trainable());
        }
    }

    fed.run_round(1);
    for (const auto& [name, want] : central.trainable()) {
        const Tensor& got = fed.global().at(name);
        for (std::size_t i = 0; i < want.size(); ++i) {
            ASSERT_NEAR(got[i], want[i], 1e-5 * std::max(1.0f, std::abs(want[i]))) << name << "[" << i << "]";
        }
    }
}

TEST(Federation, ZeroRoundsIsEmpty) {
    Toy t = toy();
    FederationConfig cfg = toy_config();
    cfg.rounds = 0;
    Federation fed(cfg, t.net, t.train, t.test, lda_partition(t.train.labels, cfg.num_clients, 0.5, 0));
    EXPECT_TRUE(fed.run().empty());
    EXPECT_EQ(fed.ledger().total(), 0u);
}

TEST(Federation, DeterministicAndThreadCountInvariant) {
    Toy t = toy();
    const PartitionMap p = lda_partition(t.train.labels, 4, 0.5, 0);
    auto run = [&](std::size_t workers) {
        FederationConfig cfg = toy_config();
        cfg.parallel_clients = workers;
        Federation fed(cfg, t.net, t.train, t.test, p);
        auto reports = fed.run();
        return std::make_pair(reports, fed.global());
    };
    const auto [r1, g1] = run(1);
    const auto [r2, g2] = run(1);
    const auto [r3, g3] = run(3);
    ASSERT_EQ(r1.size(), 3u);
    for (std::size_t i = 0; i < r1.size(); ++i) {
        EXPECT_EQ(r1[i].test_accuracy, r2[i].test_accuracy);
        EXPECT_EQ(r1[i].test_loss, r2[i].test_loss);
        EXPECT_EQ(r1[i].train_loss, r3[i].train_loss);
        EXPECT_EQ(r1[i].cumulative_tcc, r3[i].cumulative_tcc);
        EXPECT_EQ(r1[i].sampled, r3[i].sampled);
    }
    for (const auto& [name, tensor] : g1) {
        EXPECT_TRUE(bit_equal(tensor, g2.at(name))) << name;
        EXPECT_TRUE(bit_equal(tensor, g3.at(name))) << name;
    }
}

TEST(Federation, LedgerAddsUpAndBaseNeverMoves) {
    Toy t = toy();
    FederationConfig cfg = toy_config();
    Federation fed(cfg, t.net, t.train, t.test, lda_partition(t.train.labels, 4, 0.5, 0));
    const auto reports = fed.run();
    std::uint64_t running = 0;
    const std::size_t message = serialize(encode_update(0, 0, fed.global(), 0)).size();
    for (const RoundReport& r : reports) {
        running += r.uplink_bytes + r.downlink_bytes;
        EXPECT_EQ(r.cumulative_tcc, running);
        EXPECT_EQ(r.uplink_bytes, r.sampled.size() * message);
        EXPECT_EQ(r.downlink_bytes, r.uplink_bytes);
    }
    EXPECT_EQ(fed.ledger().total(), tcc(reports.size(), message) * 2);  // 2 clients per round
    for (const auto& [name, tensor] : t.net.params) {
        EXPECT_TRUE(bit_equal(fed.global_model().base().at(name), tensor)) << name;
    }
}

TEST(Federation, Int8ChangesOnlyBytesAndStaysFinite) {
    Toy t = toy();
    const PartitionMap p = lda_partition(t.train.labels, 4, 0.5, 0);
    FederationConfig cfg = toy_config();
    Federation fp(cfg, t.net, t.train, t.test, p);
    cfg.quant_bits = 8;
    Federation q8(cfg, t.net, t.train, t.test, p);
    const auto a = fp.run(), b = q8.run();
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_LT(b[i].uplink_bytes, a[i].uplink_bytes);
        EXPECT_TRUE(std::isfinite(b[i].test_loss));
        EXPECT_TRUE(std::isfinite(b[i].train_loss));
        EXPECT_EQ(a[i].sampled, b[i].sampled);
    }
}

TEST(Federation, FullRankAdaptersTrackFedAvgOnOneConvModel) {
    SyntheticSpec s;
    s.example_shape = {3, 8, 8};
    s.noise = 1.0f;
    s.seed = 2;
    const Dataset train = synthetic_dataset(s, 40, 1), test = synthetic_dataset(s, 20, 2);
    ModelSpec spec("one_conv", {3, 8, 8});
    spec.add_conv("conv", 4, 3, 1, 1);
    spec.add_group_norm("gn");
    spec.add_relu("relu");
    spec.add_pool("pool");
    spec.add_fc("fc", 3);
    const Network net{spec, init_params(spec, 3)};
    const PartitionMap p = lda_partition(train.labels, 4, 0.5, 0);
    FederationConfig cfg;
    cfg.num_clients = 4;
    cfg.sample_fraction = 1.0;
    cfg.rounds = 10;
    cfg.local_epochs = 1;
    cfg.batch_size = 16;
    cfg.lr = 0.02f;
    cfg.rank = 4;  // = output channels, so the low-rank update spans every kernel change
    cfg.alpha = 4.0f;
    cfg.freeze = FreezeVariant::none;
    const double fedavg = run_experiment(cfg, net, train, test, p).back().test_loss;
    cfg.freeze = FreezeVariant::plus_norm_plus_final_fc;
    const double flocora = run_experiment(cfg, net, train, test, p).back().test_loss;
    EXPECT_LE(std::abs(fedavg - flocora) / fedavg, 0.05) << fedavg << " vs " << flocora;
}

TEST(Federation, RejectsMismatchedPartition) {
    Toy t = toy();
    FederationConfig cfg = toy_config();
    EXPECT_THROW(Federation(cfg, t.net, t.train, t.test, lda_partition(t.train.labels, 3, 0.5, 0)), ConfigError);
    cfg.quant_bits = 3;
    EXPECT_THROW(Federation(cfg, t.net, t.train, t.test, lda_partition(t.train.labels, 4, 0.5, 0)), ConfigError);
}
