#pragma once

// Uniform affine quantizer:
//   codes = clamp(round(z / step) - beta, 0, 2^b - 1)
//   step  = max(z_max - z_min, 0) / (2^b - 1), floored at epsilon_step
//   beta  = round(z_min / step)
// with per-tensor, per-channel, per-token and group-wise slicing, a
// clipped straight-through gradient for fake quantization, and exact
// integer quantize/dequantize for export.

#include <cstdint>
#include <vector>

#include "slq/tensor.hpp"

namespace slq {

enum class Granularity : uint8_t { per_tensor = 0, per_channel = 1, per_token = 2, group_wise = 3 };

const char* granularity_name(Granularity g);

struct QuantSpec {
    int bits = 4;
    Granularity granularity = Granularity::per_tensor;
    // Channel axis for per_channel / per_token / group_wise (2-D tensors only).
    // Group-wise keeps one (step, beta) pair per channel per group of
    // `group_size` consecutive entries along the other axis.
    int axis = 1;
    int64_t group_size = 0;
    float epsilon_step = 1e-8f;
    // Dynamic fake-quant only: also differentiate through the min-max step
    // (the round stays straight-through). Plain STE cannot see how a
    // learnable scale reshapes the grid, so the calibration engine turns
    // this on; the default matches the masked-identity STE contract.
    bool range_grad = false;

    int64_t max_code() const { return (int64_t(1) << bits) - 1; }
    void validate(const Shape& shape) const;   // throws ConfigError naming the constraint

    static QuantSpec weights_per_channel(int bits);
    static QuantSpec weights_group_wise(int bits, int64_t group_size);
    static QuantSpec acts_per_token(int bits);
};

struct QuantParams {
    std::vector<float> step;     // per slice, > 0
    std::vector<int64_t> beta;   // per slice
    Shape shape;                 // tensor shape the slicing refers to
    Granularity granularity = Granularity::per_tensor;
    int axis = 1;
    int64_t group_size = 0;

    int64_t slice_count() const { return static_cast<int64_t>(step.size()); }
    int64_t slice_of(int64_t row, int64_t col) const;
};

struct QuantizedTensor {
    Shape shape;
    std::vector<uint32_t> codes;   // one code per element, in [0, 2^bits - 1]
    QuantParams params;
    int bits = 4;

    int64_t numel() const { return static_cast<int64_t>(codes.size()); }
};

QuantParams calc_params(const Tensor& z, const QuantSpec& spec);
QuantizedTensor quantize(const Tensor& z, const QuantParams& params, const QuantSpec& spec);
Tensor dequantize(const QuantizedTensor& q);

// Quantize-dequantize with dynamic min-max params; clipped STE backward
// (unit gradient where the pre-clamp code was in range, zero where clipped).
Tensor fake_quant(const Tensor& z, const QuantSpec& spec);

// Same forward/backward but with frozen params (committed weights).
Tensor fake_quant_with_params(const Tensor& z, const QuantParams& params, const QuantSpec& spec);

// Fake-quantizes columns [0, cols) of a 2-D tensor, passes the rest through
// untouched (gradient 1). cols == 0 returns the input unchanged.
Tensor fake_quant_partial_cols(const Tensor& z, const QuantSpec& spec, int64_t cols);

} // namespace slq
