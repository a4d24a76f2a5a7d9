// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "flocora/dataset.hpp"
#include "flocora/federation.hpp"
#include "flocora/partition.hpp"
#include "flocora/wire.hpp"

namespace flocora {

/// Environment variable that anchors relative dataset paths.
inline constexpr const char* kDataRootEnv = "FLOCORA_DATA_ROOT";

struct DataConfig {
    std::string source = "synthetic";  // synthetic | cifar10
    /// CIFAR-10 binary directory; relative paths resolve against $FLOCORA_DATA_ROOT.
    std::string path = "cifar-10-batches-bin";
    double dirichlet_alpha = 0.5;
    SyntheticSpec synthetic;
    std::size_t train_per_class = 200;
    std::size_t test_per_class = 100;
};

struct ExperimentConfig {
    std::string model = "tiny";    // tiny | resnet8 | resnet18
    std::string method = "flocora";  // flocora | fedavg
    float alpha_over_rank = 16.0f;
    /// federation.seed and federation.alpha are derived per run; the rest is used as is.
    FederationConfig federation;
    DataConfig data;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::filesystem::path output_dir = "runs/default";

    /// Engine settings for one seed of the seed list.
    FederationConfig federation_for(std::uint64_t seed) const;
    void validate() const;
};

/// Parses the YAML config format. Unknown keys and malformed values raise
/// ConfigError naming the offending key.
ExperimentConfig parse_config(const std::string& yaml_text);
ExperimentConfig load_config(const std::filesystem::path& file);
/// Fully resolved config (every default filled in) in the same format.
std::string to_yaml(const ExperimentConfig& cfg);

std::filesystem::path resolve_data_path(const DataConfig& data);

struct ExperimentData {
    Dataset train;
    Dataset test;
};

/// Throws MissingDataError naming the path when CIFAR-10 is not found.
ExperimentData load_data(const DataConfig& data);

struct SeedRun {
    std::uint64_t seed = 0;
    std::vector<RoundReport> rounds;
};

/// One federation per seed: model init, partition and engine all keyed by it.
std::vector<SeedRun> run_seeds(const ExperimentConfig& cfg, const ExperimentData& data);

struct Stat {
    double mean = 0.0;
    /// Sample standard deviation (n - 1 denominator); 0 for a single value.
    double stddev = 0.0;
    std::vector<double> values;
};

Stat describe(const std::vector<double>& values);

/// Columns: round,seed,accuracy,loss,uplink_bytes,downlink_bytes,cumulative_tcc.
/// accuracy is the global test accuracy after aggregation; loss is the
/// n_i-weighted mean local training loss of the round.
void write_metrics_csv(const std::filesystem::path& file, const std::vector<SeedRun>& runs);
/// Mean and sample std over seeds of final accuracy, best-round accuracy and total TCC.
void write_summary_json(const std::filesystem::path& file, const ExperimentConfig& cfg,
                        const std::vector<SeedRun>& runs);

/// Runs every seed and writes config.resolved.yaml, metrics.csv and
/// summary.json into cfg.output_dir. Progress goes to `log`.
std::vector<SeedRun> cmd_run(const ExperimentConfig& cfg, std::ostream& log);

/// One row per (rank, bits) printed as a table and written as CSV.
std::vector<MessageSizeReport> cmd_size_report(const std::string& model, const std::vector<std::size_t>& ranks,
                                               const std::vector<int>& bits, std::uint64_t rounds,
                                               const std::filesystem::path& csv, std::ostream& out);

/// Writes partition.json and histogram.csv (client,n,class_0..class_{K-1})
/// into `out_dir` and returns the partition.
PartitionMap cmd_partition(const DataConfig& data, std::size_t clients, double alpha, std::uint64_t seed,
                           const std::filesystem::path& out_dir, std::ostream& out);

/// Sends the model's trainable set through encode/serialize/deserialize/decode
/// at every requested bit width and checks the per-element error bound and
/// byte accounting. Returns true when every check holds.
bool cmd_quantize_roundtrip_check(const std::string& model, std::size_t rank, const std::vector<int>& bits,
                                  std::uint64_t seed, std::ostream& out);

}  // namespace flocora
