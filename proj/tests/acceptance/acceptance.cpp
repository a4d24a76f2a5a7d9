// SPDX-License-Identifier: Apache-2.0
//
// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "../unit/oracles.hpp"
#include "flocora/autograd.hpp"
#include "flocora/experiment.hpp"
#include "flocora/federation.hpp"
#include "flocora/lora.hpp"
#include "flocora/model.hpp"
#include "flocora/quant.hpp"
#include "flocora/wire.hpp"

using namespace flocora;
using namespace flocora::testing;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail += (detail.empty() ? "" : "; ") + what;
        }
    }
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

bool within(double got, double want, double rel) {
    return std::abs(got - want) <= rel * std::abs(want);
}

// 1: parameter counts of ResNet-8 and its adapted variants.
Outcome parameter_counts() {
    Outcome o;
    const Network net = build_resnet8(10, 0);
    const double total = static_cast<double>(count_parameters(net.params));
    o.require(within(total, 1.23e6, 0.02), fmt("resnet8 total %.0f", total));
    const std::vector<std::size_t> ranks{8, 16, 32, 64, 128};
    const std::vector<double> trainable{69.45e3, 131.92e3, 256.84e3, 506.70e3, 1.00e6};
    const std::vector<double> totals{1.30e6, 1.36e6, 1.48e6, 1.73e6, 2.23e6};
    const FreezePolicy policy;
    std::string got;
    for (std::size_t i = 0; i < ranks.size(); ++i) {
        const AdaptedModel m = attach_adapters(net, ranks[i], 16.0f * static_cast<float>(ranks[i]), policy, 0);
        const double t = static_cast<double>(m.count_parameters(ParamFilter::trainable));
        const double all = static_cast<double>(m.count_parameters(ParamFilter::all));
        o.require(within(t, trainable[i], 0.02), fmt("r=%.0f trainable %.0f", ranks[i], t));
        o.require(within(all, totals[i], 0.02), fmt("r=%.0f total %.0f", ranks[i], all));
        got += fmt(" r%.0f:%.0f/%.0f", ranks[i], t, all);
    }
    if (o.pass) {
        o.detail = fmt("total %.0f;", total) + got;
    }
    return o;
}

// 2: total communication cost over 100 rounds of ResNet-8.
Outcome tcc_goldens() {
    Outcome o;
    constexpr double MB = 1e6;
    const double full = message_size_report("resnet8", 0, 0, 100).tcc_payload_bytes / MB;
    const double r32 = message_size_report("resnet8", 32, 0, 100).tcc_payload_bytes / MB;
    o.require(within(full, 982.07, 0.005), fmt("full fp32 %.2f MB", full));
    o.require(within(r32, 205.47, 0.005), fmt("r32 fp32 %.2f MB", r32));
    const double q8 = message_size_report("resnet8", 32, 8, 100).tcc_bytes / MB;
    const double q4 = message_size_report("resnet8", 32, 4, 100).tcc_bytes / MB;
    const double q2 = message_size_report("resnet8", 32, 2, 100).tcc_bytes / MB;
    o.require(within(q8, 55.56, 0.05), fmt("r32 int8 %.2f MB", q8));
    o.require(within(q4, 30.15, 0.05), fmt("r32 int4 %.2f MB", q4));
    o.require(within(q2, 17.44, 0.05), fmt("r32 int2 %.2f MB", q2));
    if (o.pass) {
        o.detail = fmt("full %.2f, r32 %.2f, ", full, r32) + fmt("q8 %.2f, q4 %.2f, q2 %.2f MB", q8, q4, q2);
    }
    return o;
}

// 3: serialized ResNet-18 message sizes.
Outcome message_sizes() {
    Outcome o;
    struct Row {
        std::size_t rank;
        int bits;
        double mb, tol;
    };
    const std::vector<Row> rows{{0, 0, 44.7, 0.02},  {64, 0, 9.2, 0.05}, {32, 0, 4.6, 0.05},
                                {16, 0, 2.4, 0.05},  {64, 8, 2.4, 0.10}, {32, 8, 1.2, 0.10},
                                {16, 8, 0.7, 0.10}};
    std::string got;
    for (const Row& r : rows) {
        const double mb = message_size_report("resnet18", r.rank, r.bits, 1).message_bytes / 1e6;
        o.require(within(mb, r.mb, r.tol), fmt("r=%.0f bits=%.0f %.3f MB", r.rank, r.bits, mb));
        got += fmt(" %.3f", mb);
    }
    if (o.pass) {
        o.detail = "MB:" + got;
    }
    return o;
}

// 4: adapter branch against the merged kernel.
Outcome merge_equivalence() {
    Outcome o;
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<std::size_t> ch(1, 8), rk(1, 8), side(3, 7), st(1, 2);
    double worst = 0.0;
    const int trials = 200;
    for (int trial = 0; trial < trials; ++trial) {
        const std::size_t O = ch(rng), I = ch(rng), r = rk(rng), K = trial % 2 ? 3 : 1;
        const std::size_t stride = st(rng), pad = K == 3 ? 1 : 0;
        const Tensor x = random_tensor({2, I, side(rng), side(rng)}, rng);
        const Tensor w = random_tensor({O, I, K, K}, rng);
        const AdapterPair p{random_tensor({r, I, K, K}, rng), random_tensor({O, r, 1, 1}, rng), r,
                            static_cast<float>(r) * 2.0f, "x"};
        Tape tape(false);
        const Var a = adapter_forward(tape.constant(x), tape.constant(w), tape.constant(p.B), tape.constant(p.A),
                                      p.scaling(), stride, pad);
        const Var m = conv2d(tape.constant(x), tape.constant(merge_adapter(w, p)), stride, pad);
        const std::vector<double> want(m.value().data().begin(), m.value().data().end());
        worst = std::max(worst, max_rel_error(a.value().data(), want));
    }
    o.require(worst <= 1e-5, fmt("max rel error %.3g", worst));
    o.detail = fmt("%.0f instances, max rel error %.3g", trials, worst);
    return o;
}

// 5: analytic gradients against central differences.
Outcome gradient_checks() {
    Outcome o;
    std::mt19937_64 rng(42);
    std::size_t compared = 0;
    double worst = 0.0;
    auto check = [&](const char* op, std::vector<Tensor*> inputs,
                     const std::function<Var(Tape&, std::vector<Var>&)>& build, const Tensor* probe) {
        for (Tensor* t : inputs) {
            t->set_requires_grad(true);
        }
        {
            Tape tape;
            std::vector<Var> vars;
            for (Tensor* t : inputs) {
                vars.push_back(tape.parameter(*t));
            }
            const Var out = build(tape, vars);
            tape.backward(probe ? sum(mul(out, tape.constant_ref(*probe))) : out);
        }
        auto loss = [&] {
            Tape tape(false);
            std::vector<Var> vars;
            for (Tensor* t : inputs) {
                vars.push_back(tape.parameter(*t));
            }
            const Tensor& out = build(tape, vars).value();
            if (!probe) {
                return static_cast<double>(out[0]);
            }
            double acc = 0.0;
            for (std::size_t i = 0; i < out.size(); ++i) {
                acc += static_cast<double>(out[i]) * (*probe)[i];
            }
            return acc;
        };
        for (std::size_t k = 0; k < inputs.size(); ++k) {
            Tensor& t = *inputs[k];
            const std::vector<float> analytic(t.grad().begin(), t.grad().end());
            std::uniform_int_distribution<std::size_t> pick(0, t.size() - 1);
            for (int c = 0; c < 12; ++c) {
                const std::size_t i = pick(rng);
                const double numeric = central_difference(t, i, 1e-3f, loss);
                ++compared;
                const double rel = std::abs(analytic[i] - numeric) / std::max(std::abs(numeric), 1e-4);
                worst = std::max(worst, rel);
                o.require(grad_close(analytic[i], numeric), std::string(op) + fmt(" input %.0f coord %.0f", k, i));
            }
        }
    };
    {
        Tensor x = random_tensor({2, 3, 6, 6}, rng), k = random_tensor({4, 3, 3, 3}, rng);
        const Tensor probe = random_tensor({2, 4, 3, 3}, rng);
        check("conv2d", {&x, &k}, [](Tape&, std::vector<Var>& v) { return conv2d(v[0], v[1], 2, 1); }, &probe);
    }
    {
        Tensor x = random_tensor({2, 4, 3, 3}, rng, -2.0f, 2.0f), g = random_tensor({4}, rng, 0.5f, 1.5f),
               b = random_tensor({4}, rng);
        const Tensor probe = random_tensor({2, 4, 3, 3}, rng);
        check("group_norm", {&x, &g, &b},
              [](Tape&, std::vector<Var>& v) { return group_norm(v[0], 2, v[1], v[2]); }, &probe);
    }
    {
        Tensor x = random_tensor({3, 5}, rng), w = random_tensor({5, 4}, rng), b = random_tensor({4}, rng);
        const Tensor probe = random_tensor({3, 4}, rng);
        check("linear", {&x, &w, &b}, [](Tape&, std::vector<Var>& v) { return linear(v[0], v[1], v[2]); }, &probe);
    }
    {
        Tensor z = random_tensor({4, 6}, rng, -2.0f, 2.0f);
        const std::vector<int> labels{0, 5, 2, 2};
        check("softmax_cross_entropy", {&z},
              [&](Tape&, std::vector<Var>& v) { return softmax_cross_entropy(v[0], labels); }, nullptr);
    }
    {
        Tensor x = random_tensor({2, 3, 5, 5}, rng), w = random_tensor({4, 3, 3, 3}, rng),
               b = random_tensor({2, 3, 3, 3}, rng), a = random_tensor({4, 2, 1, 1}, rng);
        const Tensor probe = random_tensor({2, 4, 5, 5}, rng);
        check("adapter", {&x, &b, &a},
              [&](Tape& tape, std::vector<Var>& v) {
                  return adapter_forward(v[0], tape.constant_ref(w), v[1], v[2], 1.5f, 1, 1);
              },
              &probe);
    }
    if (o.pass) {
        o.detail = fmt("%.0f coordinates over 5 ops, worst rel error %.3g", compared, worst);
    }
    return o;
}

// 6: affine quantization and bit packing.
Outcome quantization() {
    Outcome o;
    std::mt19937_64 rng(6);
    double worst = 0.0;
    for (int bits : {2, 4, 8}) {
        for (int trial = 0; trial < 50; ++trial) {
            const Tensor x = random_tensor({6, 5, 3, 3}, rng, -3.0f, 2.0f);
            const QuantizedTensor q = quantize(x, 0, bits);
            const Tensor y = dequantize(q);
            const auto ch = channel_of_elements(x.shape(), 0);
            for (std::size_t i = 0; i < x.size(); ++i) {
                const double bound = q.params.scale[ch[i]] / 2.0;
                worst = std::max(worst, std::abs(static_cast<double>(x[i]) - y[i]) / bound);
                if (std::abs(static_cast<double>(x[i]) - y[i]) > bound + 1e-6) {
                    o.require(false, fmt("round trip beyond scale/2 at %.0f bits", bits));
                }
            }
            const QuantizedTensor again = quantize(y, q.params);
            o.require(again.packed == q.packed, fmt("codes not idempotent at %.0f bits", bits));
        }
        for (std::size_t len = 0; len <= 64; ++len) {
            std::vector<std::uint8_t> codes(len);
            std::uniform_int_distribution<int> code(0, (1 << bits) - 1);
            for (auto& c : codes) {
                c = static_cast<std::uint8_t>(code(rng));
            }
            const auto packed = pack_codes(codes, bits);
            o.require(packed.size() == packed_code_bytes(len, bits) && unpack_codes(packed, len, bits) == codes,
                      fmt("pack/unpack at %.0f bits, length %.0f", bits, len));
        }
    }
    if (o.pass) {
        o.detail = fmt("worst error / (scale/2) = %.4f", worst);
    }
    return o;
}

// 7: weighted aggregation against an FP64 brute-force mean.
Outcome aggregation() {
    Outcome o;
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::size_t> count(1, 10), n(1, 500);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<ClientUpdate> ups(count(rng));
        for (std::size_t i = 0; i < ups.size(); ++i) {
            ups[i].client = i;
            ups[i].num_examples = n(rng);
            ups[i].tensors.emplace("w", random_tensor({5, 4}, rng, -5.0f, 5.0f));
        }
        const ParamSet got = aggregate(ups);
        for (std::size_t j = 0; j < 20; ++j) {
            double num = 0.0, den = 0.0;
            for (const auto& u : ups) {
                num += static_cast<double>(u.num_examples) * u.tensors.at("w")[j];
                den += static_cast<double>(u.num_examples);
            }
            const double want = num / den;
            const double rel = std::abs(got.at("w")[j] - want) / std::max(std::abs(want), 1e-3);
            worst = std::max(worst, rel);
        }
    }
    o.require(worst <= 1e-6, fmt("max rel error %.3g", worst));

    std::vector<ClientUpdate> same(3);
    std::vector<ClientUpdate> opposite(2);
    const Tensor base = random_tensor({7}, rng);
    Tensor neg = base;
    for (float& v : neg.data()) {
        v = -v;
    }
    for (std::size_t i = 0; i < 3; ++i) {
        same[i] = {i, 10 * (i + 1), {{"w", base}}, 0.0, 0};
    }
    opposite[0] = {0, 5, {{"w", base}}, 0.0, 0};
    opposite[1] = {1, 5, {{"w", neg}}, 0.0, 0};
    o.require(bit_equal(aggregate(same).at("w"), base), "identical updates are not a fixed point");
    const Tensor zero = aggregate(opposite).at("w");
    o.require(std::all_of(zero.data().begin(), zero.data().end(), [](float v) { return v == 0.0f; }),
              "opposite updates do not cancel");
    if (o.pass) {
        o.detail = fmt("100 trials, max rel error %.3g; fixed point and cancellation exact", worst);
    }
    return o;
}

// Desk-scale federated runs shared by criteria 8 and 9.
struct Desk {
    ExperimentConfig cfg;
    ExperimentData data;
    std::size_t min_width = 0;
    std::map<std::string, std::vector<std::vector<RoundReport>>> runs;

    explicit Desk(const std::string& config)
        : cfg(load_config(config)), data(load_data(cfg.data)) {
        const Network probe = build_model(cfg.model, data.train.num_classes, 0, data.train.example_shape);
        min_width = SIZE_MAX;
        for (const auto& [name, t] : probe.params) {
            if (t.shape().size() == 4) {
                min_width = std::min(min_width, t.shape()[0]);
            }
        }
    }

    const std::vector<std::vector<RoundReport>>& run(const std::string& key, FreezeVariant freeze, int bits) {
        auto it = runs.find(key);
        if (it != runs.end()) {
            return it->second;
        }
        std::vector<std::vector<RoundReport>> out;
        for (std::uint64_t seed : cfg.seeds) {
            ExperimentConfig c = cfg;
            c.method = freeze == FreezeVariant::none ? "fedavg" : "flocora";
            c.federation.freeze = freeze;
            c.federation.rank = min_width;
            c.federation.quant_bits = bits;
            const auto t0 = std::chrono::steady_clock::now();
            c.seeds = {seed};
            out.push_back(run_seeds(c, data).front().rounds);
            const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::printf("  [%s seed %llu] final accuracy %.4f (%.1f s)\n", key.c_str(),
                        static_cast<unsigned long long>(seed), out.back().back().test_accuracy, s);
            std::fflush(stdout);
        }
        return runs.emplace(key, std::move(out)).first->second;
    }

    static double mean_final(const std::vector<std::vector<RoundReport>>& r) {
        double acc = 0.0;
        for (const auto& rounds : r) {
            acc += rounds.back().test_accuracy;
        }
        return acc / static_cast<double>(r.size());
    }
};

// 8: desk-scale convergence and uplink ratio.
Outcome desk_convergence(Desk& desk) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    const auto& fedavg = desk.run("fedavg", FreezeVariant::none, 0);
    const auto& flocora = desk.run("flocora", FreezeVariant::plus_norm_plus_final_fc, 0);
    const auto& int8 = desk.run("flocora_int8", FreezeVariant::plus_norm_plus_final_fc, 8);
    const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
    const double a = Desk::mean_final(fedavg), b = Desk::mean_final(flocora), c = Desk::mean_final(int8);
    o.require(a >= 0.90, fmt("fedavg %.4f < 0.90", a));
    o.require(a - b <= 0.03, fmt("flocora %.4f more than 3 points below fedavg", b));
    o.require(a - c <= 0.04, fmt("flocora int8 %.4f more than 4 points below fedavg", c));

    const double up_full = static_cast<double>(fedavg[0][0].uplink_bytes);
    const double up_lora = static_cast<double>(flocora[0][0].uplink_bytes);
    const Network net = build_model(desk.cfg.model, desk.data.train.num_classes, 0, desk.data.train.example_shape);
    const AdaptedModel adapted = attach_adapters(net, desk.min_width, 1.0f, FreezePolicy{}, 0);
    const double param_ratio = static_cast<double>(adapted.count_parameters(ParamFilter::trainable)) /
                               static_cast<double>(count_parameters(net.params));
    const double byte_ratio = up_lora / up_full;
    o.require(up_lora < up_full, "flocora uplink not below fedavg");
    o.require(within(byte_ratio, param_ratio, 0.05), fmt("byte ratio %.4f vs parameter ratio %.4f", byte_ratio,
                                                         param_ratio));
    o.require(minutes <= 10.0, fmt("took %.1f minutes", minutes));
    o.detail = fmt("fedavg %.4f, flocora %.4f, int8 %.4f", a, b, c) +
               fmt(", uplink ratio %.4f vs params %.4f, %.1f min", byte_ratio, param_ratio, minutes);
    return o;
}

// 9: freeze-policy ablation ordering.
Outcome ablation(Desk& desk) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    const double vanilla = Desk::mean_final(desk.run("vanilla", FreezeVariant::vanilla, 0));
    const double norm = Desk::mean_final(desk.run("plus_norm", FreezeVariant::plus_norm, 0));
    const double full = Desk::mean_final(desk.run("flocora", FreezeVariant::plus_norm_plus_final_fc, 0));
    const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
    o.require(vanilla < norm && norm < full, "ordering vanilla < plus_norm < plus_norm_plus_final_fc violated");
    o.require(minutes <= 15.0, fmt("took %.1f minutes", minutes));
    o.detail = fmt("vanilla %.4f, plus_norm %.4f, plus_norm_plus_final_fc %.4f, %.1f min", vanilla, norm, full,
                   minutes);
    return o;
}

// 10: bit-identical metrics across reruns.
Outcome determinism(const std::string& config) {
    Outcome o;
    ExperimentConfig cfg = load_config(config);
    cfg.federation.parallel_clients = 1;
    const ExperimentData data = load_data(cfg.data);
    cfg.seeds = {cfg.seeds.front()};
    const auto dir = std::filesystem::temp_directory_path() / "flocora_acceptance_determinism";
    std::filesystem::create_directories(dir);
    write_metrics_csv(dir / "a.csv", run_seeds(cfg, data));
    write_metrics_csv(dir / "b.csv", run_seeds(cfg, data));
    auto slurp = [](const std::filesystem::path& p) {
        std::FILE* f = std::fopen(p.c_str(), "rb");
        std::string s;
        char buf[4096];
        for (std::size_t n; f && (n = std::fread(buf, 1, sizeof buf, f)) > 0;) {
            s.append(buf, n);
        }
        if (f) {
            std::fclose(f);
        }
        return s;
    };
    const std::string a = slurp(dir / "a.csv"), b = slurp(dir / "b.csv");
    o.require(!a.empty() && a == b, "metrics.csv differs between runs");
    std::filesystem::remove_all(dir);
    o.detail = fmt("%.0f bytes of metrics.csv identical", static_cast<double>(a.size()));
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    const std::string source = argc > 1 ? argv[1] : FLOCORA_SOURCE_DIR;
    const std::string desk_config = source + "/configs/desk.yaml";
    const std::string toy_config = source + "/configs/toy.yaml";
    bool skip_desk = false;
    for (int i = 1; i < argc; ++i) {
        skip_desk = skip_desk || std::strcmp(argv[i], "--skip-desk") == 0;
    }

    int failures = 0;
    auto report = [&](int id, const char* name, const std::function<Outcome()>& fn) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("exception: ") + e.what();
        }
        failures += o.pass ? 0 : 1;
        std::printf("criterion %2d %-28s %s  %s\n", id, name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
        std::fflush(stdout);
    };

    report(1, "parameter-counts", parameter_counts);
    report(2, "tcc-goldens", tcc_goldens);
    report(3, "message-sizes", message_sizes);
    report(4, "merge-equivalence", merge_equivalence);
    report(5, "gradient-checks", gradient_checks);
    report(6, "quantization", quantization);
    report(7, "aggregation", aggregation);
    if (skip_desk) {
        std::printf("criterion  8 desk-convergence             SKIPPED\ncriterion  9 ablation-ordering            SKIPPED\n");
    } else {
        std::unique_ptr<Desk> desk;
        try {
            desk = std::make_unique<Desk>(desk_config);
        } catch (const std::exception& e) {
            std::printf("cannot load %s: %s\n", desk_config.c_str(), e.what());
        }
        report(8, "desk-convergence", [&] { return desk ? desk_convergence(*desk) : Outcome{false, "no desk config"}; });
        report(9, "ablation-ordering", [&] { return desk ? ablation(*desk) : Outcome{false, "no desk config"}; });
    }
    report(10, "determinism", [&] { return determinism(toy_config); });
    std::printf("%d of 10 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
