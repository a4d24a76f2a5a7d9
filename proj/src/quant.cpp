// SPDX-License-Identifier: Apache-2.0

#include "flocora/quant.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "flocora/error.hpp"

namespace flocora {

bool is_supported_bit_width(int bits) {
    return bits == 2 || bits == 4 || bits == 8;
}

namespace {
void require_bits(int bits) {
    if (!is_supported_bit_width(bits)) {
        throw ConfigError("unsupported bit width " + std::to_string(bits) + " (expected 2, 4 or 8)");
    }
}
}  // namespace

int default_channel_axis(const Shape& shape) {
    if (shape.size() == 4) {
        return 0;
    }
    if (shape.size() == 2) {
        return 1;
    }
    return -1;
}

std::size_t channel_count(const Shape& shape, int axis) {
    if (axis < 0) {
        return 1;
    }
    if (static_cast<std::size_t>(axis) >= shape.size()) {
        throw ShapeError("channel axis " + std::to_string(axis) + " out of range for " + to_string(shape));
    }
    return shape[static_cast<std::size_t>(axis)];
}

std::vector<std::size_t> channel_of_elements(const Shape& shape, int axis) {
    const std::size_t n = numel(shape);
    std::vector<std::size_t> out(n, 0);
    if (axis < 0) {
        return out;
    }
    const std::size_t channels = channel_count(shape, axis);
    std::size_t inner = 1;
    for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < shape.size(); ++d) {
        inner *= shape[d];
    }
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = (i / inner) % channels;
    }
    return out;
}

double round_half_away(double x) {
    return std::round(x);
}

QuantParams compute_affine_params(const Tensor& x, int axis, int bits) {
    require_bits(bits);
    QuantParams qp;
    qp.bits = bits;
    qp.axis = axis;
    const std::size_t channels = channel_count(x.shape(), axis);
    std::vector<float> lo(channels, 0.0f);
    std::vector<float> hi(channels, 0.0f);
    const std::vector<std::size_t> ch = channel_of_elements(x.shape(), axis);
    for (std::size_t i = 0; i < x.size(); ++i) {
        lo[ch[i]] = std::min(lo[ch[i]], x[i]);
        hi[ch[i]] = std::max(hi[ch[i]], x[i]);
    }
    const std::int32_t qmax = qp.max_code();
    qp.scale.resize(channels);
    qp.zero_point.resize(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        const float range = hi[c] - lo[c];
        float scale = range / static_cast<float>(qmax);
        if (!(scale > 0.0f) || !std::isfinite(scale)) {
            qp.scale[c] = 1.0f;
            qp.zero_point[c] = 0;
            continue;
        }
        const double zp = round_half_away(-static_cast<double>(lo[c]) * qmax /
                                          (static_cast<double>(hi[c]) - static_cast<double>(lo[c])));
        qp.scale[c] = scale;
        qp.zero_point[c] = static_cast<std::int32_t>(std::clamp(zp, 0.0, static_cast<double>(qmax)));
    }
    return qp;
}

QuantizedTensor quantize(const Tensor& x, const QuantParams& params) {
    require_bits(params.bits);
    if (params.channels() != channel_count(x.shape(), params.axis) || params.zero_point.size() != params.channels()) {
        throw ShapeError("quant params for " + std::to_string(params.channels()) + " channels do not fit tensor " +
                         to_string(x.shape()));
    }
    const std::vector<std::size_t> ch = channel_of_elements(x.shape(), params.axis);
    const double qmax = params.max_code();
    std::vector<std::uint8_t> codes(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t c = ch[i];
        const double q = round_half_away(static_cast<double>(x[i]) / params.scale[c]) + params.zero_point[c];
        codes[i] = static_cast<std::uint8_t>(std::clamp(q, 0.0, qmax));
    }
    return {x.shape(), params, pack_codes(codes, params.bits)};
}

QuantizedTensor quantize(const Tensor& x, int axis, int bits) {
    return quantize(x, compute_affine_params(x, axis, bits));
}

Tensor dequantize(const QuantizedTensor& q) {
    require_bits(q.params.bits);
    const std::size_t n = numel(q.shape);
    if (q.packed.size() != packed_code_bytes(n, q.params.bits)) {
        throw IntegrityError("packed code length " + std::to_string(q.packed.size()) + " does not match " +
                             std::to_string(n) + " codes at " + std::to_string(q.params.bits) + " bits");
    }
    const std::size_t channels = channel_count(q.shape, q.params.axis);
    if (q.params.scale.size() != channels || q.params.zero_point.size() != channels) {
        throw IntegrityError("expected " + std::to_string(channels) + " scale/zero-point pairs");
    }
    const std::vector<std::uint8_t> codes = unpack_codes(q.packed, n, q.params.bits);
    const std::vector<std::size_t> ch = channel_of_elements(q.shape, q.params.axis);
    Tensor out(q.shape);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = ch[i];
        out[i] = q.params.scale[c] * static_cast<float>(static_cast<std::int32_t>(codes[i]) - q.params.zero_point[c]);
    }
    return out;
}

std::size_t packed_code_bytes(std::size_t count, int bits) {
    return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, int bits) {
    require_bits(bits);
    std::vector<std::uint8_t> out(packed_code_bytes(codes.size(), bits), 0);
    const std::uint8_t mask = static_cast<std::uint8_t>((1u << bits) - 1u);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] > mask) {
            throw Error("code " + std::to_string(codes[i]) + " does not fit in " + std::to_string(bits) + " bits");
        }
        const std::size_t bit = i * static_cast<std::size_t>(bits);
        out[bit / 8] |= static_cast<std::uint8_t>(codes[i] << (bit % 8));
    }
    return out;
}

std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> packed, std::size_t count, int bits) {
    require_bits(bits);
    if (packed.size() != packed_code_bytes(count, bits)) {
        throw IntegrityError("packed length " + std::to_string(packed.size()) + " cannot hold exactly " +
                             std::to_string(count) + " codes");
    }
    std::vector<std::uint8_t> out(count);
    const unsigned mask = (1u << bits) - 1u;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t bit = i * static_cast<std::size_t>(bits);
        out[i] = static_cast<std::uint8_t>((packed[bit / 8] >> (bit % 8)) & mask);
    }
    return out;
}

std::size_t quantized_payload_bytes(const Shape& shape, int axis, int bits) {
    require_bits(bits);
    std::size_t n = 1;
    for (std::size_t e : shape) {
        n *= e;
    }
    return packed_code_bytes(n, bits) + channel_count(shape, axis) * 8;
}

}  // namespace flocora
