// SPDX-License-Identifier: Apache-2.0

#include "flocora/dataset.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <string>

#include "flocora/error.hpp"
#include "flocora/random.hpp"

namespace flocora {

std::span<const float> Dataset::example(std::size_t i) const {
    const std::size_t n = example_size();
    return std::span<const float>(images).subspan(i * n, n);
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
    if (indices.empty()) {
        throw ShapeError("cannot build an empty batch");
    }
    Shape shape{indices.size()};
    shape.insert(shape.end(), example_shape.begin(), example_shape.end());
    Tensor out(std::move(shape));
    const std::size_t n = example_size();
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const auto src = example(indices[b]);
        std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * n));
    }
    return out;
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out(indices.size());
    for (std::size_t b = 0; b < indices.size(); ++b) {
        out[b] = labels.at(indices[b]);
    }
    return out;
}

namespace {
constexpr float kCifarMean[3] = {0.4914f, 0.4822f, 0.4465f};
constexpr float kCifarStd[3] = {0.2470f, 0.2435f, 0.2616f};

void append_cifar_batch(const std::filesystem::path& file, Dataset& into) {
    if (!std::filesystem::exists(file)) {
        throw MissingDataError("CIFAR-10 batch " + file.string() + " not found");
    }
    std::ifstream in(file, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open CIFAR-10 batch " + file.string());
    }
    std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (raw.size() != kCifarBatchBytes) {
        throw FormatError("CIFAR-10 batch " + file.string() + " has " + std::to_string(raw.size()) +
                          " bytes, expected " + std::to_string(kCifarBatchBytes));
    }
    const std::size_t plane = 32 * 32;
    const std::size_t base = into.images.size();
    into.images.resize(base + kCifarBatchRecords * 3 * plane);
    into.labels.reserve(into.labels.size() + kCifarBatchRecords);
    for (std::size_t r = 0; r < kCifarBatchRecords; ++r) {
        const auto* rec = reinterpret_cast<const unsigned char*>(raw.data()) + r * kCifarRecordBytes;
        if (rec[0] >= 10) {
            throw FormatError("CIFAR-10 batch " + file.string() + " record " + std::to_string(r) + " has label " +
                              std::to_string(rec[0]));
        }
        into.labels.push_back(rec[0]);
        float* dst = into.images.data() + base + r * 3 * plane;
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t p = 0; p < plane; ++p) {
                const float v = static_cast<float>(rec[1 + c * plane + p]) / 255.0f;
                dst[c * plane + p] = (v - kCifarMean[c]) / kCifarStd[c];
            }
        }
    }
}

Dataset empty_cifar() {
    Dataset d;
    d.example_shape = {3, 32, 32};
    d.num_classes = 10;
    d.channel_mean.assign(std::begin(kCifarMean), std::end(kCifarMean));
    d.channel_std.assign(std::begin(kCifarStd), std::end(kCifarStd));
    return d;
}
}  // namespace

Dataset read_cifar10_batch(const std::filesystem::path& file) {
    Dataset d = empty_cifar();
    append_cifar_batch(file, d);
    return d;
}

Cifar10 load_cifar10(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) {
        throw MissingDataError("CIFAR-10 directory " + dir.string() + " not found");
    }
    Cifar10 out{empty_cifar(), empty_cifar()};
    for (int i = 1; i <= 5; ++i) {
        append_cifar_batch(dir / ("data_batch_" + std::to_string(i) + ".bin"), out.train);
    }
    append_cifar_batch(dir / "test_batch.bin", out.test);
    return out;
}

std::vector<std::vector<float>> synthetic_class_means(const SyntheticSpec& spec) {
    if (spec.example_shape.size() != 3 || spec.num_classes < 2) {
        throw ConfigError("synthetic data needs a [C,H,W] shape and at least two classes");
    }
    const std::size_t ch = spec.example_shape[0], h = spec.example_shape[1], w = spec.example_shape[2];
    std::vector<std::vector<float>> means(spec.num_classes, std::vector<float>(ch * h * w));
    Rng rng(derive_seed({spec.seed, 0x6d65616e73ULL}));
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    std::normal_distribution<float> gauss(0.0f, 1.0f);
    constexpr float two_pi = 2.0f * std::numbers::pi_v<float>;
    for (auto& mean : means) {
        for (std::size_t c = 0; c < ch; ++c) {
            const float offset = 0.5f * gauss(rng);
            float freq[2], theta[2], phase[2];
            for (int j = 0; j < 2; ++j) {
                freq[j] = 2.0f + 4.0f * unit(rng);
                theta[j] = std::numbers::pi_v<float> * unit(rng);
                phase[j] = two_pi * unit(rng);
            }
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) {
                    float v = offset;
                    for (int j = 0; j < 2; ++j) {
                        const float u = (static_cast<float>(x) * std::cos(theta[j]) +
                                         static_cast<float>(y) * std::sin(theta[j])) /
                                        static_cast<float>(w);
                        v += std::cos(two_pi * freq[j] * u + phase[j]);
                    }
                    mean[(c * h + y) * w + x] = v;
                }
            }
        }
    }
    return means;
}

Dataset synthetic_dataset(const SyntheticSpec& spec, std::size_t per_class, std::uint64_t stream) {
    if (per_class == 0) {
        throw ConfigError("synthetic data needs at least one example per class");
    }
    const auto means = synthetic_class_means(spec);
    Dataset d;
    d.example_shape = spec.example_shape;
    d.num_classes = spec.num_classes;
    d.channel_mean.assign(spec.example_shape[0], 0.0f);
    d.channel_std.assign(spec.example_shape[0], 1.0f);
    const std::size_t n = numel(spec.example_shape);
    d.images.resize(spec.num_classes * per_class * n);
    d.labels.resize(spec.num_classes * per_class);
    Rng rng(derive_seed({spec.seed, 0x6e6f697365ULL, stream}));
    std::normal_distribution<float> gauss(0.0f, 1.0f);
    // Interleave classes so that prefixes of the dataset stay balanced.
    for (std::size_t i = 0; i < per_class; ++i) {
        for (std::size_t k = 0; k < spec.num_classes; ++k) {
            const std::size_t idx = i * spec.num_classes + k;
            d.labels[idx] = static_cast<int>(k);
            float* dst = d.images.data() + idx * n;
            for (std::size_t p = 0; p < n; ++p) {
                dst[p] = means[k][p] + spec.noise * gauss(rng);
            }
        }
    }
    return d;
}

}  // namespace flocora
