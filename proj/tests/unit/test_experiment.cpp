// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "flocora/error.hpp"
#include "flocora/experiment.hpp"

using namespace flocora;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("flocora_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ExperimentConfig toy_config(const fs::path& out) {
    ExperimentConfig cfg = load_config(fs::path(FLOCORA_SOURCE_DIR) / "configs" / "toy.yaml");
    cfg.output_dir = out;
    return cfg;
}

}  // namespace

TEST(Config, DefaultsValidate) {
    const ExperimentConfig cfg = parse_config("");
    EXPECT_EQ(cfg.model, "tiny");
    EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{0, 1, 2}));
}

TEST(Config, ReadsEverySection) {
    const ExperimentConfig cfg = parse_config(R"(
model: resnet8
federation: {method: flocora, freeze: plus_norm, num_clients: 20, rank: 16, alpha_over_rank: 4, quant_bits: 4}
data: {source: synthetic, dirichlet_alpha: 0.1, synthetic: {noise: 2.5, shape: [3, 8, 8], train_per_class: 9}}
seeds: [4, 5]
output_dir: out/x
)");
    EXPECT_EQ(cfg.model, "resnet8");
    EXPECT_EQ(cfg.federation.freeze, FreezeVariant::plus_norm);
    EXPECT_EQ(cfg.federation.num_clients, 20u);
    EXPECT_EQ(cfg.federation.quant_bits, 4);
    EXPECT_DOUBLE_EQ(cfg.data.dirichlet_alpha, 0.1);
    EXPECT_FLOAT_EQ(cfg.data.synthetic.noise, 2.5f);
    EXPECT_EQ(cfg.data.synthetic.example_shape, (Shape{3, 8, 8}));
    EXPECT_EQ(cfg.data.train_per_class, 9u);
    EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{4, 5}));
    const FederationConfig f = cfg.federation_for(5);
    EXPECT_EQ(f.seed, 5u);
    EXPECT_FLOAT_EQ(f.alpha, 64.0f);
}

TEST(Config, FedAvgMethodTrainsTheWholeModel) {
    const ExperimentConfig cfg = parse_config("federation: {method: fedavg}");
    EXPECT_EQ(cfg.federation_for(0).freeze, FreezeVariant::none);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
    EXPECT_THROW(parse_config("modle: tiny"), ConfigError);
    EXPECT_THROW(parse_config("federation: {rnak: 8}"), ConfigError);
    EXPECT_THROW(parse_config("data: {synthetic: {colour: red}}"), ConfigError);
    EXPECT_THROW(parse_config("federation: {rank: eight}"), ConfigError);
    EXPECT_THROW(parse_config("federation: {quant_bits: 3}"), ConfigError);
    EXPECT_THROW(parse_config("model: vgg"), ConfigError);
    EXPECT_THROW(parse_config("seeds: []"), ConfigError);
    EXPECT_THROW(parse_config("data: {dirichlet_alpha: 0}"), ConfigError);
    EXPECT_THROW(parse_config("a: [1, 2"), ConfigError);
}

TEST(Config, ResolvedYamlParsesBackToTheSameConfig) {
    const ExperimentConfig a = toy_config("runs/x");
    const ExperimentConfig b = parse_config(to_yaml(a));
    EXPECT_EQ(to_yaml(a), to_yaml(b));
}

TEST(Config, RelativeDataPathUsesTheDataRoot) {
    DataConfig d;
    d.path = "cifar";
    ::setenv(kDataRootEnv, "/data", 1);
    EXPECT_EQ(resolve_data_path(d), fs::path("/data/cifar"));
    d.path = "/abs/cifar";
    EXPECT_EQ(resolve_data_path(d), fs::path("/abs/cifar"));
    ::unsetenv(kDataRootEnv);
}

TEST(Describe, SampleStandardDeviation) {
    const Stat s = describe({1.0, 2.0, 3.0, 4.0});
    EXPECT_DOUBLE_EQ(s.mean, 2.5);
    EXPECT_NEAR(s.stddev, 1.2909944487358056, 1e-15);
    EXPECT_DOUBLE_EQ(describe({7.0}).stddev, 0.0);
}

TEST(Run, ToyConfigFinishesFastWithNonIncreasingLoss) {
    const fs::path out = scratch_dir("toy");
    ExperimentConfig cfg = toy_config(out);
    EXPECT_EQ(cfg.federation.num_clients, 8u);
    EXPECT_EQ(cfg.federation.rounds, 5u);
    std::ostringstream log;
    const auto t0 = std::chrono::steady_clock::now();
    const auto runs = cmd_run(cfg, log);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EXPECT_LT(seconds, 60.0);
    ASSERT_EQ(runs.size(), 1u);
    ASSERT_EQ(runs[0].rounds.size(), 5u);
    for (std::size_t r = 1; r < 5; ++r) {
        EXPECT_LE(runs[0].rounds[r].train_loss, runs[0].rounds[r - 1].train_loss) << "round " << r + 1;
    }
    EXPECT_TRUE(fs::exists(out / "config.resolved.yaml"));
    EXPECT_TRUE(fs::exists(out / "summary.json"));
    const std::string csv = slurp(out / "metrics.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "round,seed,accuracy,loss,uplink_bytes,downlink_bytes,cumulative_tcc");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
}

TEST(Run, RerunGivesBitIdenticalMetrics) {
    const fs::path a = scratch_dir("rerun_a"), b = scratch_dir("rerun_b");
    std::ostringstream log;
    cmd_run(toy_config(a), log);
    cmd_run(toy_config(b), log);
    EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
    EXPECT_EQ(slurp(a / "summary.json"), slurp(b / "summary.json"));
}

TEST(Run, MissingCifarDirectoryRaisesMissingData) {
    ExperimentConfig cfg = toy_config(scratch_dir("missing"));
    cfg.data.source = "cifar10";
    cfg.data.path = "/nonexistent/cifar-10-batches-bin";
    std::ostringstream log;
    EXPECT_THROW(cmd_run(cfg, log), MissingDataError);
}

TEST(Cli, MissingDatasetExitsTwoAndNamesThePath) {
    const fs::path dir = scratch_dir("cli_missing");
    std::ofstream(dir / "cfg.yaml") << "data: {source: cifar10, path: /nonexistent/cifar-dir-xyz}\nseeds: [0]\n"
                                    << "output_dir: " << (dir / "out").string() << "\n";
    const std::string cmd = std::string(FLOCORA_CLI) + " run --config " + (dir / "cfg.yaml").string() + " 2> " +
                            (dir / "err.txt").string();
    const int status = std::system(cmd.c_str());
    ASSERT_TRUE(WIFEXITED(status));
    EXPECT_EQ(WEXITSTATUS(status), 2);
    EXPECT_NE(slurp(dir / "err.txt").find("/nonexistent/cifar-dir-xyz"), std::string::npos);
}

TEST(Cli, BadConfigExitsNonZero) {
    const fs::path dir = scratch_dir("cli_bad");
    std::ofstream(dir / "cfg.yaml") << "federation: {rnak: 8}\n";
    const std::string cmd =
        std::string(FLOCORA_CLI) + " run --config " + (dir / "cfg.yaml").string() + " 2> /dev/null";
    const int status = std::system(cmd.c_str());
    ASSERT_TRUE(WIFEXITED(status));
    EXPECT_EQ(WEXITSTATUS(status), 1);
}

TEST(PartitionCommand, SingleClientOwnsEverything) {
    DataConfig data;
    data.train_per_class = 10;
    std::ostringstream log;
    const PartitionMap map = cmd_partition(data, 1, 0.5, 3, scratch_dir("part1"), log);
    ASSERT_EQ(map.clients.size(), 1u);
    EXPECT_EQ(map.clients[0].size(), 30u);
}

TEST(PartitionCommand, ConcentrationControlsHeterogeneity) {
    DataConfig data;
    data.train_per_class = 100;
    std::ostringstream log;
    const ExperimentData d = load_data(data);
    const auto entropy = [&](double alpha) {
        const PartitionMap m = cmd_partition(data, 10, alpha, 1, scratch_dir("part_entropy"), log);
        return mean_label_entropy(m, d.train.labels, d.train.num_classes);
    };
    EXPECT_LT(entropy(0.5), entropy(1e6));
}

TEST(PartitionCommand, WrittenMapReloadsIdentically) {
    DataConfig data;
    data.train_per_class = 20;
    const fs::path out = scratch_dir("part_reload");
    std::ostringstream log;
    const PartitionMap map = cmd_partition(data, 4, 0.5, 11, out, log);
    EXPECT_EQ(load_partition(out / "partition.json").clients, map.clients);
    const std::string hist = slurp(out / "histogram.csv");
    EXPECT_EQ(hist.substr(0, hist.find('\n')), "client,n,class_0,class_1,class_2");
}

TEST(SizeReport, ReproducesReferenceTotals) {
    std::ostringstream table;
    const fs::path csv = scratch_dir("size") / "sizes.csv";
    const auto rows = cmd_size_report("resnet8", {0, 32}, {0, 8}, 100, csv, table);
    ASSERT_EQ(rows.size(), 4u);
    std::map<std::pair<std::size_t, int>, MessageSizeReport> by;
    for (const auto& r : rows) {
        by[{r.rank, r.bits}] = r;
    }
    const MessageSizeReport& full = by[std::make_pair(std::size_t{0}, 0)];
    const MessageSizeReport& r32q8 = by[std::make_pair(std::size_t{32}, 8)];
    EXPECT_NEAR(full.tcc_payload_bytes / 1e6, 982.07, 982.07 * 0.005);
    EXPECT_NEAR(r32q8.tcc_bytes / 1e6, 55.56, 55.56 * 0.05);
    EXPECT_EQ(full.total_params, 1227594u);
    EXPECT_TRUE(fs::exists(csv));
    EXPECT_NE(table.str().find("resnet8"), std::string::npos);
}

TEST(QuantizeRoundtrip, ChecksPassForEveryWidth) {
    std::ostringstream out;
    EXPECT_TRUE(cmd_quantize_roundtrip_check("tiny", 8, {8, 4, 2}, 1, out));
    EXPECT_TRUE(cmd_quantize_roundtrip_check("tiny", 0, {8}, 2, out));
}
