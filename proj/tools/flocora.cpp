// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "flocora/error.hpp"
#include "flocora/experiment.hpp"

using namespace flocora;

int main(int argc, char** argv) {
    CLI::App app{"Federated training with frozen random bases and low-rank adapters"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    std::optional<std::size_t> workers;
    auto* run = app.add_subcommand("run", "Run a federated experiment from a YAML config");
    run->add_option("--config", config_path, "Experiment config (YAML)")->required()->check(CLI::ExistingFile);
    run->add_option("--seed", seed, "Run only this seed");
    run->add_option("--out", out_dir, "Output directory (overrides output_dir)");
    run->add_option("--parallel-clients", workers, "Clients trained concurrently per round");

    std::string model = "resnet8";
    std::vector<std::size_t> ranks{0, 8, 16, 32, 64, 128};
    std::vector<int> bits{0, 8, 4, 2};
    std::uint64_t rounds = 100;
    std::string csv;
    auto* size = app.add_subcommand("size-report", "Tabulate parameter counts, message sizes and TCC");
    size->add_option("--model", model, "resnet8, resnet18 or tiny")->capture_default_str();
    size->add_option("--ranks", ranks, "Adapter ranks (0 = full model)")->capture_default_str();
    size->add_option("--bits", bits, "Bit widths (0 = fp32)")->capture_default_str();
    size->add_option("--rounds", rounds, "Rounds counted in TCC")->capture_default_str();
    size->add_option("--csv", csv, "Also write the table as CSV");

    DataConfig data;
    std::size_t clients = 100;
    double alpha = 0.5;
    std::uint64_t part_seed = 0;
    std::string part_config;
    std::string part_out = "runs/partition";
    auto* part = app.add_subcommand("partition", "Split the training set across clients and write histograms");
    part->add_option("--config", part_config, "Take the data section from this config")->check(CLI::ExistingFile);
    part->add_option("--clients", clients)->capture_default_str();
    part->add_option("--alpha", alpha, "Dirichlet concentration")->capture_default_str();
    part->add_option("--seed", part_seed)->capture_default_str();
    part->add_option("--out", part_out)->capture_default_str();

    std::size_t q_rank = 32;
    std::vector<int> q_bits{8, 4, 2};
    std::uint64_t q_seed = 0;
    auto* quant = app.add_subcommand("quantize-roundtrip-check", "Encode, serialize and decode a model update");
    quant->add_option("--model", model)->capture_default_str();
    quant->add_option("--rank", q_rank, "Adapter rank (0 = full model)")->capture_default_str();
    quant->add_option("--bits", q_bits)->capture_default_str();
    quant->add_option("--seed", q_seed)->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            ExperimentConfig cfg = load_config(config_path);
            if (seed) {
                cfg.seeds = {*seed};
            }
            if (!out_dir.empty()) {
                cfg.output_dir = out_dir;
            }
            if (workers) {
                cfg.federation.parallel_clients = *workers;
            }
            cmd_run(cfg, std::cout);
            std::cout << "wrote " << cfg.output_dir.string() << "\n";
        } else if (*size) {
            cmd_size_report(model, ranks, bits, rounds, csv, std::cout);
        } else if (*part) {
            if (!part_config.empty()) {
                data = load_config(part_config).data;
            }
            cmd_partition(data, clients, alpha, part_seed, part_out, std::cout);
        } else if (*quant) {
            return cmd_quantize_roundtrip_check(model, q_rank, q_bits, q_seed, std::cout) ? 0 : 1;
        }
    } catch (const MissingDataError& e) {
        std::cerr << "error: " << e.what() << "\n"
                  << "Point data.path at the extracted cifar-10-batches-bin directory or set " << kDataRootEnv
                  << ".\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
