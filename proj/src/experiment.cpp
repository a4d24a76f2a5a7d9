// SPDX-License-Identifier: Apache-2.0

#include "flocora/experiment.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "flocora/error.hpp"
#include "flocora/lora.hpp"
#include "flocora/model.hpp"
#include "flocora/quant.hpp"
#include "flocora/random.hpp"

namespace flocora {

FederationConfig ExperimentConfig::federation_for(std::uint64_t seed) const {
    FederationConfig f = federation;
    f.seed = seed;
    if (method == "fedavg") {
        f.freeze = FreezeVariant::none;
    } else {
        f.alpha = alpha_over_rank * static_cast<float>(f.rank);
    }
    return f;
}

void ExperimentConfig::validate() const {
    if (model != "tiny" && model != "resnet8" && model != "resnet18") {
        throw ConfigError("model must be tiny, resnet8 or resnet18, got '" + model + "'");
    }
    if (method != "flocora" && method != "fedavg") {
        throw ConfigError("federation.method must be flocora or fedavg, got '" + method + "'");
    }
    if (method == "flocora" && federation.freeze == FreezeVariant::none) {
        throw ConfigError("federation.freeze 'none' is plain fedavg; set method: fedavg instead");
    }
    if (data.source != "synthetic" && data.source != "cifar10") {
        throw ConfigError("data.source must be synthetic or cifar10, got '" + data.source + "'");
    }
    if (!(data.dirichlet_alpha > 0.0)) {
        throw ConfigError("data.dirichlet_alpha must be positive");
    }
    if (seeds.empty()) {
        throw ConfigError("seeds must list at least one seed");
    }
    if (output_dir.empty()) {
        throw ConfigError("output_dir must be set");
    }
    federation_for(seeds.front()).validate();
}

namespace {

void check_keys(const YAML::Node& node, const std::string& where, const std::set<std::string>& allowed) {
    if (!node.IsMap()) {
        throw ConfigError((where.empty() ? std::string("config") : where) + " must be a mapping");
    }
    for (const auto& kv : node) {
        const std::string key = kv.first.as<std::string>();
        if (!allowed.count(key)) {
            throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
        }
    }
}

template <typename T>
void read(const YAML::Node& node, const char* key, const std::string& where, T& into) {
    if (const YAML::Node v = node[key]) {
        try {
            into = v.as<T>();
        } catch (const YAML::Exception&) {
            throw ConfigError("config key '" + (where.empty() ? std::string(key) : where + "." + key) +
                              "' has an invalid value");
        }
    }
}

std::string yaml_error(const YAML::Exception& e) {
    return e.what();
}

}  // namespace

ExperimentConfig parse_config(const std::string& yaml_text) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml_text);
    } catch (const YAML::Exception& e) {
        throw ConfigError("config is not valid YAML: " + yaml_error(e));
    }
    ExperimentConfig cfg;
    if (!root || root.IsNull()) {
        cfg.validate();
        return cfg;
    }
    check_keys(root, "", {"model", "federation", "data", "seeds", "output_dir"});
    read(root, "model", "", cfg.model);
    if (const YAML::Node f = root["federation"]) {
        check_keys(f, "federation",
                   {"method", "freeze", "num_clients", "sample_fraction", "rounds", "local_epochs", "batch_size", "lr",
                    "momentum", "rank", "alpha_over_rank", "quant_bits", "parallel_clients"});
        FederationConfig& fc = cfg.federation;
        read(f, "method", "federation", cfg.method);
        std::string freeze = std::string(to_string(fc.freeze));
        read(f, "freeze", "federation", freeze);
        fc.freeze = parse_freeze_variant(freeze);
        read(f, "num_clients", "federation", fc.num_clients);
        read(f, "sample_fraction", "federation", fc.sample_fraction);
        read(f, "rounds", "federation", fc.rounds);
        read(f, "local_epochs", "federation", fc.local_epochs);
        read(f, "batch_size", "federation", fc.batch_size);
        read(f, "lr", "federation", fc.lr);
        read(f, "momentum", "federation", fc.momentum);
        read(f, "rank", "federation", fc.rank);
        read(f, "alpha_over_rank", "federation", cfg.alpha_over_rank);
        read(f, "quant_bits", "federation", fc.quant_bits);
        read(f, "parallel_clients", "federation", fc.parallel_clients);
    }
    if (const YAML::Node d = root["data"]) {
        check_keys(d, "data", {"source", "path", "dirichlet_alpha", "synthetic"});
        read(d, "source", "data", cfg.data.source);
        read(d, "path", "data", cfg.data.path);
        read(d, "dirichlet_alpha", "data", cfg.data.dirichlet_alpha);
        if (const YAML::Node s = d["synthetic"]) {
            check_keys(s, "data.synthetic", {"num_classes", "shape", "noise", "seed", "train_per_class", "test_per_class"});
            SyntheticSpec& sp = cfg.data.synthetic;
            read(s, "num_classes", "data.synthetic", sp.num_classes);
            read(s, "shape", "data.synthetic", sp.example_shape);
            read(s, "noise", "data.synthetic", sp.noise);
            read(s, "seed", "data.synthetic", sp.seed);
            read(s, "train_per_class", "data.synthetic", cfg.data.train_per_class);
            read(s, "test_per_class", "data.synthetic", cfg.data.test_per_class);
        }
    }
    read(root, "seeds", "", cfg.seeds);
    std::string out = cfg.output_dir.string();
    read(root, "output_dir", "", out);
    cfg.output_dir = out;
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) {
        throw ConfigError("cannot read config " + file.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string to_yaml(const ExperimentConfig& cfg) {
    const FederationConfig& f = cfg.federation;
    YAML::Emitter e;
    e << YAML::BeginMap;
    e << YAML::Key << "model" << YAML::Value << cfg.model;
    e << YAML::Key << "federation" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "method" << YAML::Value << cfg.method;
    e << YAML::Key << "freeze" << YAML::Value << std::string(to_string(f.freeze));
    e << YAML::Key << "num_clients" << YAML::Value << f.num_clients;
    e << YAML::Key << "sample_fraction" << YAML::Value << f.sample_fraction;
    e << YAML::Key << "rounds" << YAML::Value << f.rounds;
    e << YAML::Key << "local_epochs" << YAML::Value << f.local_epochs;
    e << YAML::Key << "batch_size" << YAML::Value << f.batch_size;
    e << YAML::Key << "lr" << YAML::Value << f.lr;
    e << YAML::Key << "momentum" << YAML::Value << f.momentum;
    e << YAML::Key << "rank" << YAML::Value << f.rank;
    e << YAML::Key << "alpha_over_rank" << YAML::Value << cfg.alpha_over_rank;
    e << YAML::Key << "quant_bits" << YAML::Value << f.quant_bits;
    e << YAML::Key << "parallel_clients" << YAML::Value << f.parallel_clients;
    e << YAML::EndMap;
    e << YAML::Key << "data" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "source" << YAML::Value << cfg.data.source;
    e << YAML::Key << "path" << YAML::Value << cfg.data.path;
    e << YAML::Key << "dirichlet_alpha" << YAML::Value << cfg.data.dirichlet_alpha;
    e << YAML::Key << "synthetic" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "num_classes" << YAML::Value << cfg.data.synthetic.num_classes;
    e << YAML::Key << "shape" << YAML::Value << YAML::Flow << cfg.data.synthetic.example_shape;
    e << YAML::Key << "noise" << YAML::Value << cfg.data.synthetic.noise;
    e << YAML::Key << "seed" << YAML::Value << cfg.data.synthetic.seed;
    e << YAML::Key << "train_per_class" << YAML::Value << cfg.data.train_per_class;
    e << YAML::Key << "test_per_class" << YAML::Value << cfg.data.test_per_class;
    e << YAML::EndMap << YAML::EndMap;
    e << YAML::Key << "seeds" << YAML::Value << YAML::Flow << cfg.seeds;
    e << YAML::Key << "output_dir" << YAML::Value << cfg.output_dir.string();
    e << YAML::EndMap;
    return std::string(e.c_str()) + "\n";
}

std::filesystem::path resolve_data_path(const DataConfig& data) {
    std::filesystem::path p = data.path;
    if (p.is_relative()) {
        if (const char* root = std::getenv(kDataRootEnv); root && *root) {
            p = std::filesystem::path(root) / p;
        }
    }
    return p;
}

ExperimentData load_data(const DataConfig& data) {
    if (data.source == "cifar10") {
        Cifar10 c = load_cifar10(resolve_data_path(data));
        return {std::move(c.train), std::move(c.test)};
    }
    return {synthetic_dataset(data.synthetic, data.train_per_class, 1),
            synthetic_dataset(data.synthetic, data.test_per_class, 2)};
}

std::vector<SeedRun> run_seeds(const ExperimentConfig& cfg, const ExperimentData& data) {
    cfg.validate();
    std::vector<SeedRun> out;
    for (std::uint64_t seed : cfg.seeds) {
        const FederationConfig fc = cfg.federation_for(seed);
        const Network net = build_model(cfg.model, data.train.num_classes, seed, data.train.example_shape);
        const PartitionMap part = lda_partition(data.train.labels, fc.num_clients, cfg.data.dirichlet_alpha, seed);
        out.push_back({seed, run_experiment(fc, net, data.train, data.test, part)});
    }
    return out;
}

Stat describe(const std::vector<double>& values) {
    Stat s;
    s.values = values;
    if (values.empty()) {
        return s;
    }
    for (double v : values) {
        s.mean += v;
    }
    s.mean /= static_cast<double>(values.size());
    if (values.size() > 1) {
        double sq = 0.0;
        for (double v : values) {
            sq += (v - s.mean) * (v - s.mean);
        }
        s.stddev = std::sqrt(sq / static_cast<double>(values.size() - 1));
    }
    return s;
}

namespace {
std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

void ensure_parent(const std::filesystem::path& file) {
    if (file.has_parent_path()) {
        std::filesystem::create_directories(file.parent_path());
    }
}

std::ofstream open_out(const std::filesystem::path& file) {
    ensure_parent(file);
    std::ofstream out(file, std::ios::binary);
    if (!out) {
        throw Error("cannot write " + file.string());
    }
    return out;
}

nlohmann::json to_json(const Stat& s) {
    return {{"mean", s.mean}, {"std", s.stddev}, {"values", s.values}};
}
}  // namespace

void write_metrics_csv(const std::filesystem::path& file, const std::vector<SeedRun>& runs) {
    std::ofstream out = open_out(file);
    out << "round,seed,accuracy,loss,uplink_bytes,downlink_bytes,cumulative_tcc\n";
    for (const SeedRun& run : runs) {
        for (const RoundReport& r : run.rounds) {
            out << r.round << ',' << run.seed << ',' << fmt(r.test_accuracy) << ',' << fmt(r.train_loss) << ','
                << r.uplink_bytes << ',' << r.downlink_bytes << ',' << r.cumulative_tcc << '\n';
        }
    }
}

void write_summary_json(const std::filesystem::path& file, const ExperimentConfig& cfg,
                        const std::vector<SeedRun>& runs) {
    std::vector<double> final_acc, best_acc, total_tcc;
    std::vector<std::uint64_t> seeds;
    for (const SeedRun& run : runs) {
        seeds.push_back(run.seed);
        const bool any = !run.rounds.empty();
        final_acc.push_back(any ? run.rounds.back().test_accuracy : 0.0);
        total_tcc.push_back(any ? static_cast<double>(run.rounds.back().cumulative_tcc) : 0.0);
        double best = 0.0;
        for (const RoundReport& r : run.rounds) {
            best = std::max(best, r.test_accuracy);
        }
        best_acc.push_back(best);
    }
    const nlohmann::json j = {{"model", cfg.model},
                              {"method", cfg.method},
                              {"freeze", std::string(to_string(cfg.federation_for(0).freeze))},
                              {"rounds", cfg.federation.rounds},
                              {"seeds", seeds},
                              {"final_accuracy", to_json(describe(final_acc))},
                              {"best_accuracy", to_json(describe(best_acc))},
                              {"total_tcc_bytes", to_json(describe(total_tcc))}};
    std::ofstream out = open_out(file);
    out << j.dump(2) << '\n';
}

std::vector<SeedRun> cmd_run(const ExperimentConfig& cfg, std::ostream& log) {
    cfg.validate();
    const ExperimentData data = load_data(cfg.data);
    std::filesystem::create_directories(cfg.output_dir);
    open_out(cfg.output_dir / "config.resolved.yaml") << to_yaml(cfg);

    std::vector<SeedRun> runs;
    for (std::uint64_t seed : cfg.seeds) {
        ExperimentConfig one = cfg;
        one.seeds = {seed};
        log << "seed " << seed << ": " << cfg.model << " " << cfg.method << " " << cfg.federation.rounds
            << " rounds\n";
        SeedRun run = run_seeds(one, data).front();
        for (const RoundReport& r : run.rounds) {
            log << "  round " << r.round << " acc " << fmt(r.test_accuracy) << " loss " << fmt(r.train_loss)
                << " tcc " << r.cumulative_tcc << "\n";
        }
        runs.push_back(std::move(run));
    }
    write_metrics_csv(cfg.output_dir / "metrics.csv", runs);
    write_summary_json(cfg.output_dir / "summary.json", cfg, runs);
    return runs;
}

std::vector<MessageSizeReport> cmd_size_report(const std::string& model, const std::vector<std::size_t>& ranks,
                                               const std::vector<int>& bits, std::uint64_t rounds,
                                               const std::filesystem::path& csv, std::ostream& out) {
    std::vector<MessageSizeReport> rows;
    for (std::size_t r : ranks) {
        for (int b : bits) {
            rows.push_back(message_size_report(model, r, b, rounds));
        }
    }
    out << std::left << std::setw(10) << "model" << std::setw(8) << "rank" << std::setw(6) << "bits" << std::right
        << std::setw(12) << "params" << std::setw(12) << "trainable" << std::setw(14) << "message_MB" << std::setw(14)
        << "tcc_MB" << std::setw(16) << "tcc_payload_MB" << '\n';
    for (const auto& r : rows) {
        out << std::left << std::setw(10) << r.model << std::setw(8) << (r.rank ? std::to_string(r.rank) : "full")
            << std::setw(6) << (r.bits ? std::to_string(r.bits) : "fp32") << std::right << std::setw(12)
            << r.total_params << std::setw(12) << r.trainable_params << std::fixed << std::setprecision(4)
            << std::setw(14) << static_cast<double>(r.message_bytes) / 1e6 << std::setprecision(2) << std::setw(14)
            << static_cast<double>(r.tcc_bytes) / 1e6 << std::setw(16)
            << static_cast<double>(r.tcc_payload_bytes) / 1e6 << std::defaultfloat << '\n';
    }
    if (!csv.empty()) {
        std::ofstream f = open_out(csv);
        f << "model,rank,bits,total_params,trainable_params,message_bytes,payload_bytes,rounds,tcc_bytes,"
             "tcc_payload_bytes\n";
        for (const auto& r : rows) {
            f << r.model << ',' << r.rank << ',' << r.bits << ',' << r.total_params << ',' << r.trainable_params << ','
              << r.message_bytes << ',' << r.payload_bytes << ',' << r.rounds << ',' << r.tcc_bytes << ','
              << r.tcc_payload_bytes << '\n';
        }
    }
    return rows;
}

PartitionMap cmd_partition(const DataConfig& data, std::size_t clients, double alpha, std::uint64_t seed,
                           const std::filesystem::path& out_dir, std::ostream& out) {
    const ExperimentData d = load_data(data);
    const PartitionMap map = lda_partition(d.train.labels, clients, alpha, seed);
    std::filesystem::create_directories(out_dir);
    save_partition(map, out_dir / "partition.json");
    const auto hist = class_histogram(map, d.train.labels, d.train.num_classes);
    std::ofstream f = open_out(out_dir / "histogram.csv");
    f << "client,n";
    for (std::size_t k = 0; k < d.train.num_classes; ++k) {
        f << ",class_" << k;
    }
    f << '\n';
    for (std::size_t c = 0; c < hist.size(); ++c) {
        f << c << ',' << map.client_size(c);
        for (std::size_t v : hist[c]) {
            f << ',' << v;
        }
        f << '\n';
    }
    out << clients << " clients, alpha " << alpha << ", seed " << seed << ": mean label entropy "
        << fmt(mean_label_entropy(map, d.train.labels, d.train.num_classes)) << " nats\n";
    return map;
}

bool cmd_quantize_roundtrip_check(const std::string& model, std::size_t rank, const std::vector<int>& bits,
                                  std::uint64_t seed, std::ostream& out) {
    const Network net = build_model(model, 10, seed);
    ParamSet values = rank ? attach_adapters(net, rank, 16.0f * static_cast<float>(rank), FreezePolicy{}, seed).trainable()
                           : net.params;
    // Adapters start with B = 0; give every tensor generic values.
    Rng rng(derive_seed({seed, 0x7274ULL}));
    std::normal_distribution<float> gauss(0.0f, 0.05f);
    for (auto& [name, t] : values) {
        for (float& v : t.data()) {
            v += gauss(rng);
        }
    }
    bool ok = true;
    for (int b : bits) {
        const UpdateMessage msg = encode_update(1, 0, values, b);
        const std::vector<std::uint8_t> bytes = serialize(msg);
        const UpdateMessage back = deserialize(bytes);
        const ParamSet decoded = decode_update(back);
        std::size_t expected = kMessageHeaderBytes;
        double worst_ratio = 0.0;
        for (const WireTensor& w : msg.tensors) {
            const Tensor& x = values.at(w.name);
            const Tensor& y = decoded.at(w.name);
            if (const auto* q = std::get_if<QuantizedTensor>(&w.payload)) {
                const auto channel = channel_of_elements(x.shape(), q->params.axis);
                for (std::size_t i = 0; i < x.size(); ++i) {
                    const double bound = q->params.scale[channel[i]] / 2.0 + 1e-6;
                    worst_ratio = std::max(worst_ratio, std::abs(static_cast<double>(x[i]) - y[i]) / bound);
                }
                expected += record_header_bytes(w.name, x.shape(), w.encoding(), q->params.channels()) +
                            quantized_payload_bytes(x.shape(), q->params.axis, q->params.bits);
            } else {
                ok = ok && bit_equal(x, y);
                expected += record_header_bytes(w.name, x.shape(), Encoding::fp32, 0) + 4 * x.size();
            }
        }
        const bool sized = expected == bytes.size();
        const bool bounded = worst_ratio <= 1.0;
        ok = ok && sized && bounded;
        out << model << " rank " << rank << " bits " << (b ? std::to_string(b) : "fp32") << ": " << bytes.size()
            << " bytes (" << (sized ? "accounted" : "MISMATCH") << "), worst error / (scale/2) = " << fmt(worst_ratio)
            << (bounded ? "" : " EXCEEDS BOUND") << '\n';
    }
    return ok;
}

}  // namespace flocora
