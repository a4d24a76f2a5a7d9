// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "flocora/model.hpp"
#include "flocora/quant.hpp"
#include "flocora/tensor.hpp"

namespace flocora {

// Update message layout, all integers little-endian:
//
//   header   magic "FLCR" | u16 version | u32 round | u32 sender | u32 tensor count
//   record   u16 name length | name bytes | u8 rank | u32 extent x rank |
//            u8 encoding (0 fp32, 2/4/8 = bits) | u8 channel axis (0xFF = whole tensor) |
//            [quantized: u32 channels | (f32 scale, f32 zero point) x channels] |
//            u64 code/value byte count | bytes
//
// fp32 values are IEEE-754 binary32, little-endian.

inline constexpr std::uint32_t kWireVersion = 1;
inline constexpr std::uint32_t kServerSender = 0xFFFFFFFFu;
inline constexpr std::size_t kMessageHeaderBytes = 18;

enum class Encoding : std::uint8_t { fp32 = 0, q2 = 2, q4 = 4, q8 = 8 };

Encoding encoding_for_bits(int bits);  // 0 -> fp32
int bits_of(Encoding e);               // fp32 -> 0

struct WireTensor {
    std::string name;
    std::variant<Tensor, QuantizedTensor> payload;

    Encoding encoding() const;
    const Shape& shape() const;
};

struct UpdateMessage {
    std::uint32_t round = 0;
    std::uint32_t sender = 0;
    std::vector<WireTensor> tensors;
};

std::vector<std::uint8_t> serialize(const UpdateMessage& message);
/// Throws IntegrityError on any truncation, trailing bytes, or inconsistent
/// declared length.
UpdateMessage deserialize(std::span<const std::uint8_t> bytes);

/// Record overhead (everything except the payload bytes) of one tensor.
std::size_t record_header_bytes(const std::string& name, const Shape& shape, Encoding encoding, std::size_t channels);

/// Builds a message from named tensors. With bits in {2,4,8}, every tensor
/// except group-norm gamma/beta is quantized along default_channel_axis;
/// bits = 0 sends everything as fp32.
UpdateMessage encode_update(std::uint32_t round, std::uint32_t sender, const ParamSet& tensors, int bits);
/// Dequantizes every record back into a parameter set.
ParamSet decode_update(const UpdateMessage& message);

/// Total communication cost over `rounds`: 2 * rounds * bytes_per_exchange
/// (one download and one upload per round).
std::uint64_t tcc(std::uint64_t rounds, std::uint64_t bytes_per_exchange);

/// Per-round, per-client byte ledger.
class CostLedger {
public:
    struct Entry {
        std::uint32_t round;
        std::uint32_t client;
        std::uint64_t uplink;
        std::uint64_t downlink;
    };

    void record(std::uint32_t round, std::uint32_t client, std::uint64_t uplink, std::uint64_t downlink);

    const std::vector<Entry>& entries() const { return entries_; }
    std::uint64_t uplink_total() const { return uplink_; }
    std::uint64_t downlink_total() const { return downlink_; }
    std::uint64_t total() const { return uplink_ + downlink_; }
    std::uint64_t uplink_in_round(std::uint32_t round) const;
    std::uint64_t downlink_in_round(std::uint32_t round) const;

private:
    std::vector<Entry> entries_;
    std::uint64_t uplink_ = 0;
    std::uint64_t downlink_ = 0;
};

struct MessageSizeReport {
    std::string model;
    std::size_t rank = 0;  // 0: full model (FedAvg)
    int bits = 0;          // 0: fp32
    std::size_t total_params = 0;
    std::size_t trainable_params = 0;
    std::size_t message_bytes = 0;  // one serialized message
    std::size_t payload_bytes = 0;  // message minus all headers
    std::uint64_t rounds = 0;
    std::uint64_t tcc_bytes = 0;         // from measured message bytes
    std::uint64_t tcc_payload_bytes = 0; // from payload bytes only (2 R Q_p |w| form)
};

/// Sizes measured by serializing the actual trainable set of `model_name`
/// (resnet8 / resnet18 / tiny) with rank r (0 = full model) under the default
/// FLoCoRA freeze policy, alpha = 16 r.
MessageSizeReport message_size_report(const std::string& model_name, std::size_t rank, int bits, std::uint64_t rounds,
                                      std::size_t num_classes = 10);

}  // namespace flocora
