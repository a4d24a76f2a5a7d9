// SPDX-License-Identifier: Apache-2.0

#include "flocora/wire.hpp"

#include <bit>
#include <cstring>
#include <set>

#include "flocora/error.hpp"
#include "flocora/lora.hpp"

namespace flocora {

Encoding encoding_for_bits(int bits) {
    switch (bits) {
    case 0: return Encoding::fp32;
    case 2: return Encoding::q2;
    case 4: return Encoding::q4;
    case 8: return Encoding::q8;
    default: throw ConfigError("unsupported encoding for " + std::to_string(bits) + " bits");
    }
}

int bits_of(Encoding e) {
    return static_cast<int>(e);
}

Encoding WireTensor::encoding() const {
    if (const auto* q = std::get_if<QuantizedTensor>(&payload)) {
        return encoding_for_bits(q->params.bits);
    }
    return Encoding::fp32;
}

const Shape& WireTensor::shape() const {
    if (const auto* q = std::get_if<QuantizedTensor>(&payload)) {
        return q->shape;
    }
    return std::get<Tensor>(payload).shape();
}

namespace {

constexpr std::uint8_t kMagic[4] = {'F', 'L', 'C', 'R'};
constexpr std::uint8_t kWholeTensorAxis = 0xFF;

class Writer {
public:
    explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}

    template <typename T>
    void put(T value) {
        static_assert(std::is_integral_v<T>);
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            out_.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(value) >> (8 * i)));
        }
    }
    void put_f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
    void put_bytes(std::span<const std::uint8_t> bytes) { out_.insert(out_.end(), bytes.begin(), bytes.end()); }

private:
    std::vector<std::uint8_t>& out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
        }
        pos_ += sizeof(T);
        return static_cast<T>(v);
    }
    float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
    std::span<const std::uint8_t> take(std::size_t n) {
        need(n);
        auto s = in_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return in_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (in_.size() - pos_ < n) {
            throw IntegrityError("update message truncated at byte " + std::to_string(pos_));
        }
    }

    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

}  // namespace

std::size_t record_header_bytes(const std::string& name, const Shape& shape, Encoding encoding, std::size_t /*channels*/) {
    std::size_t n = 2 + name.size() + 1 + 4 * shape.size() + 1 + 1 + 8;
    if (encoding != Encoding::fp32) {
        n += 4;
    }
    return n;
}

std::vector<std::uint8_t> serialize(const UpdateMessage& message) {
    std::vector<std::uint8_t> out;
    Writer w(out);
    w.put_bytes(kMagic);
    w.put(static_cast<std::uint16_t>(kWireVersion));
    w.put(message.round);
    w.put(message.sender);
    w.put(static_cast<std::uint32_t>(message.tensors.size()));

    std::set<std::string> seen;
    for (const WireTensor& t : message.tensors) {
        if (!seen.insert(t.name).second) {
            throw Error("duplicate tensor name '" + t.name + "' in update message");
        }
        if (t.name.size() > 0xFFFF) {
            throw Error("tensor name too long");
        }
        const Shape& shape = t.shape();
        if (shape.empty() || shape.size() > 0xFF) {
            throw ShapeError("cannot serialize tensor '" + t.name + "' of rank " + std::to_string(shape.size()));
        }
        w.put(static_cast<std::uint16_t>(t.name.size()));
        w.put_bytes({reinterpret_cast<const std::uint8_t*>(t.name.data()), t.name.size()});
        w.put(static_cast<std::uint8_t>(shape.size()));
        for (std::size_t e : shape) {
            if (e > 0xFFFFFFFFu) {
                throw ShapeError("extent too large to serialize");
            }
            w.put(static_cast<std::uint32_t>(e));
        }
        w.put(static_cast<std::uint8_t>(t.encoding()));
        if (const auto* q = std::get_if<QuantizedTensor>(&t.payload)) {
            const QuantParams& qp = q->params;
            if (qp.axis >= static_cast<int>(shape.size()) || qp.axis >= kWholeTensorAxis) {
                throw ShapeError("invalid channel axis for '" + t.name + "'");
            }
            if (q->packed.size() != packed_code_bytes(numel(shape), qp.bits) ||
                qp.channels() != channel_count(shape, qp.axis) || qp.zero_point.size() != qp.channels()) {
                throw IntegrityError("quantized tensor '" + t.name + "' is internally inconsistent");
            }
            w.put(static_cast<std::uint8_t>(qp.axis < 0 ? kWholeTensorAxis : qp.axis));
            w.put(static_cast<std::uint32_t>(qp.channels()));
            for (std::size_t c = 0; c < qp.channels(); ++c) {
                w.put_f32(qp.scale[c]);
                w.put_f32(static_cast<float>(qp.zero_point[c]));
            }
            w.put(static_cast<std::uint64_t>(q->packed.size()));
            w.put_bytes(q->packed);
        } else {
            const Tensor& v = std::get<Tensor>(t.payload);
            w.put(kWholeTensorAxis);
            w.put(static_cast<std::uint64_t>(v.size() * 4));
            for (float f : v.data()) {
                w.put_f32(f);
            }
        }
    }
    return out;
}

UpdateMessage deserialize(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    const auto magic = r.take(4);
    if (std::memcmp(magic.data(), kMagic, 4) != 0) {
        throw IntegrityError("bad update message magic");
    }
    const auto version = r.get<std::uint16_t>();
    if (version != kWireVersion) {
        throw IntegrityError("unsupported update message version " + std::to_string(version));
    }
    UpdateMessage m;
    m.round = r.get<std::uint32_t>();
    m.sender = r.get<std::uint32_t>();
    const auto count = r.get<std::uint32_t>();
    std::set<std::string> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        WireTensor t;
        const auto name_len = r.get<std::uint16_t>();
        const auto name = r.take(name_len);
        t.name.assign(reinterpret_cast<const char*>(name.data()), name.size());
        if (!seen.insert(t.name).second) {
            throw IntegrityError("duplicate tensor name '" + t.name + "'");
        }
        const auto rank = r.get<std::uint8_t>();
        if (rank == 0) {
            throw IntegrityError("tensor '" + t.name + "' has rank 0");
        }
        Shape shape(rank);
        for (auto& e : shape) {
            e = r.get<std::uint32_t>();
            if (e == 0) {
                throw IntegrityError("tensor '" + t.name + "' has a zero extent");
            }
        }
        const auto enc = r.get<std::uint8_t>();
        const auto axis_byte = r.get<std::uint8_t>();
        const std::size_t n = numel(shape);
        if (enc == static_cast<std::uint8_t>(Encoding::fp32)) {
            const auto len = r.get<std::uint64_t>();
            if (len != n * 4) {
                throw IntegrityError("tensor '" + t.name + "' declares " + std::to_string(len) + " bytes for " +
                                     std::to_string(n) + " fp32 values");
            }
            std::vector<float> values(n);
            for (float& v : values) {
                v = r.get_f32();
            }
            t.payload = Tensor(shape, std::move(values));
        } else if (is_supported_bit_width(enc)) {
            QuantizedTensor q;
            q.shape = shape;
            q.params.bits = enc;
            q.params.axis = axis_byte == kWholeTensorAxis ? -1 : axis_byte;
            if (q.params.axis >= static_cast<int>(rank)) {
                throw IntegrityError("tensor '" + t.name + "' has channel axis out of range");
            }
            const auto channels = r.get<std::uint32_t>();
            if (channels != channel_count(shape, q.params.axis)) {
                throw IntegrityError("tensor '" + t.name + "' declares " + std::to_string(channels) + " channels");
            }
            q.params.scale.resize(channels);
            q.params.zero_point.resize(channels);
            for (std::uint32_t c = 0; c < channels; ++c) {
                q.params.scale[c] = r.get_f32();
                q.params.zero_point[c] = static_cast<std::int32_t>(r.get_f32());
            }
            const auto len = r.get<std::uint64_t>();
            if (len != packed_code_bytes(n, enc)) {
                throw IntegrityError("tensor '" + t.name + "' declares " + std::to_string(len) + " code bytes");
            }
            const auto packed = r.take(len);
            q.packed.assign(packed.begin(), packed.end());
            t.payload = std::move(q);
        } else {
            throw IntegrityError("tensor '" + t.name + "' has unknown encoding " + std::to_string(enc));
        }
        m.tensors.push_back(std::move(t));
    }
    if (r.remaining() != 0) {
        throw IntegrityError(std::to_string(r.remaining()) + " trailing bytes after update message");
    }
    return m;
}

UpdateMessage encode_update(std::uint32_t round, std::uint32_t sender, const ParamSet& tensors, int bits) {
    if (bits != 0 && !is_supported_bit_width(bits)) {
        throw ConfigError("unsupported encoding for " + std::to_string(bits) + " bits");
    }
    UpdateMessage m;
    m.round = round;
    m.sender = sender;
    m.tensors.reserve(tensors.size());
    for (const auto& [name, t] : tensors) {
        WireTensor w;
        w.name = name;
        if (bits == 0 || is_norm_param(name)) {
            Tensor plain(t.shape(), std::vector<float>(t.data().begin(), t.data().end()));
            w.payload = std::move(plain);
        } else {
            w.payload = quantize(t, default_channel_axis(t.shape()), bits);
        }
        m.tensors.push_back(std::move(w));
    }
    return m;
}

ParamSet decode_update(const UpdateMessage& message) {
    ParamSet out;
    for (const WireTensor& t : message.tensors) {
        if (const auto* q = std::get_if<QuantizedTensor>(&t.payload)) {
            out.emplace(t.name, dequantize(*q));
        } else {
            out.emplace(t.name, std::get<Tensor>(t.payload));
        }
    }
    return out;
}

std::uint64_t tcc(std::uint64_t rounds, std::uint64_t bytes_per_exchange) {
    return 2 * rounds * bytes_per_exchange;
}

void CostLedger::record(std::uint32_t round, std::uint32_t client, std::uint64_t uplink, std::uint64_t downlink) {
    entries_.push_back({round, client, uplink, downlink});
    uplink_ += uplink;
    downlink_ += downlink;
}

std::uint64_t CostLedger::uplink_in_round(std::uint32_t round) const {
    std::uint64_t total = 0;
    for (const Entry& e : entries_) {
        if (e.round == round) {
            total += e.uplink;
        }
    }
    return total;
}

std::uint64_t CostLedger::downlink_in_round(std::uint32_t round) const {
    std::uint64_t total = 0;
    for (const Entry& e : entries_) {
        if (e.round == round) {
            total += e.downlink;
        }
    }
    return total;
}

MessageSizeReport message_size_report(const std::string& model_name, std::size_t rank, int bits, std::uint64_t rounds,
                                      std::size_t num_classes) {
    const Network net = build_model(model_name, num_classes, 0);
    FreezePolicy policy;
    policy.variant = rank == 0 ? FreezeVariant::none : FreezeVariant::plus_norm_plus_final_fc;
    const AdaptedModel model = attach_adapters(net, rank, 16.0f * static_cast<float>(rank), policy, 0);

    const std::vector<std::uint8_t> bytes = serialize(encode_update(0, kServerSender, model.trainable(), bits));
    MessageSizeReport rep;
    rep.model = model_name;
    rep.rank = rank;
    rep.bits = bits;
    rep.total_params = model.count_parameters(ParamFilter::all);
    rep.trainable_params = model.count_parameters(ParamFilter::trainable);
    rep.message_bytes = bytes.size();
    rep.payload_bytes = 0;
    for (const auto& [name, t] : model.trainable()) {
        const bool quantized = bits != 0 && !is_norm_param(name);
        rep.payload_bytes += quantized ? quantized_payload_bytes(t.shape(), default_channel_axis(t.shape()), bits)
                                       : t.size() * 4;
    }
    rep.rounds = rounds;
    rep.tcc_bytes = tcc(rounds, rep.message_bytes);
    rep.tcc_payload_bytes = tcc(rounds, rep.payload_bytes);
    return rep;
}

}  // namespace flocora
