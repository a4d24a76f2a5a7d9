// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "flocora/tensor.hpp"

namespace flocora {

/// Immutable labelled image set stored example-major.
struct Dataset {
    Shape example_shape;  // [C,H,W]
    std::size_t num_classes = 0;
    std::vector<float> images;
    std::vector<int> labels;
    /// Per-channel normalization applied at load time (value = (raw - mean) / std).
    std::vector<float> channel_mean;
    std::vector<float> channel_std;

    std::size_t size() const { return labels.size(); }
    std::size_t example_size() const { return numel(example_shape); }
    std::span<const float> example(std::size_t i) const;
    /// Gathers examples into [N,C,H,W].
    Tensor batch(std::span<const std::size_t> indices) const;
    std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
};

struct Cifar10 {
    Dataset train;
    Dataset test;
};

inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;
inline constexpr std::size_t kCifarBatchRecords = 10000;
inline constexpr std::size_t kCifarBatchBytes = kCifarRecordBytes * kCifarBatchRecords;

/// One CIFAR-10 binary batch: 10000 records of 1 label byte + 3072 pixel
/// bytes (R, G, B planes, row-major). Pixels are scaled to [0,1] and
/// normalized with the standard CIFAR-10 channel statistics.
Dataset read_cifar10_batch(const std::filesystem::path& file);
/// data_batch_1..5.bin (50000 train) and test_batch.bin (10000 test).
Cifar10 load_cifar10(const std::filesystem::path& dir);

struct SyntheticSpec {
    std::size_t num_classes = 3;
    Shape example_shape = {3, 16, 16};
    /// Standard deviation of per-pixel Gaussian noise around the class pattern.
    float noise = 1.0f;
    std::uint64_t seed = 0;
};

/// Class-conditional images: each class owns a mean pattern (two
/// oriented sinusoids of 2-6 cycles per image width plus a per-channel offset,
/// drawn from spec.seed); each
/// example adds i.i.d. Gaussian noise drawn from (spec.seed, stream). Train
/// and test splits share the patterns and differ only in `stream`.
Dataset synthetic_dataset(const SyntheticSpec& spec, std::size_t per_class, std::uint64_t stream = 0);

/// Noise-free class mean patterns used by synthetic_dataset.
std::vector<std::vector<float>> synthetic_class_means(const SyntheticSpec& spec);

}  // namespace flocora
