// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "flocora/tensor.hpp"

namespace flocora {

/// Slice-wise affine parameters. axis < 0 means one slice for the whole tensor.
struct QuantParams {
    int bits = 8;
    int axis = -1;
    std::vector<float> scale;
    std::vector<std::int32_t> zero_point;

    std::size_t channels() const { return scale.size(); }
    std::int32_t max_code() const { return (1 << bits) - 1; }
};

/// Integer codes packed densely, least-significant bits first within each
/// byte (4 codes per byte at 2 bits, 2 at 4 bits, 1 at 8 bits).
struct QuantizedTensor {
    Shape shape;
    QuantParams params;
    std::vector<std::uint8_t> packed;
};

bool is_supported_bit_width(int bits);

/// Channel axis used on the wire: output channels (axis 0) for 4-D conv
/// tensors, columns (axis 1) for 2-D FC tensors, one slice for anything else.
int default_channel_axis(const Shape& shape);
std::size_t channel_count(const Shape& shape, int axis);
/// Slice index of every flat element.
std::vector<std::size_t> channel_of_elements(const Shape& shape, int axis);

/// Round half away from zero.
double round_half_away(double x);

/// Per slice: widen [min,max] to include 0, scale = (max-min)/(2^b-1),
/// zero_point = round(-min/scale) clamped to the code range. An all-zero
/// slice gets scale 1, zero point 0.
QuantParams compute_affine_params(const Tensor& x, int axis, int bits);

/// code = clamp(round(x/scale) + zero_point, 0, 2^b-1).
QuantizedTensor quantize(const Tensor& x, const QuantParams& params);
QuantizedTensor quantize(const Tensor& x, int axis, int bits);

/// x = scale * (code - zero_point). Throws IntegrityError on inconsistent
/// packed length or parameter counts.
Tensor dequantize(const QuantizedTensor& q);

std::size_t packed_code_bytes(std::size_t count, int bits);
std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, int bits);
std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> packed, std::size_t count, int bits);

/// Code bytes plus 8 bytes per channel (FP32 scale and FP32 zero point).
std::size_t quantized_payload_bytes(const Shape& shape, int axis, int bits);

}  // namespace flocora
