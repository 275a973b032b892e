#pragma once

// Quantized model artifact: integer codes + per-slice params for the seven
// linears of every block; norms, embedding and head stay full precision.
// Activations are quantized dynamically per token at evaluation, so the
// artifact carries only their bit width.

#include <array>
#include <cstdint>
#include <vector>

#include "slq/model.hpp"
#include "slq/quantizer.hpp"

namespace slq {

struct QuantizedBlock {
    std::array<QuantizedTensor, 7> linears;   // order matches kLinearNames
    std::vector<float> norm1_gain, norm2_gain;
};

struct QuantizedModel {
    ModelConfig config;
    std::vector<uint8_t> vocab;
    int weight_bits = 4;
    int act_bits = 16;
    Granularity weight_granularity = Granularity::per_channel;
    int64_t group_size = 0;

    std::vector<float> embedding;         // [vocab * d]
    std::vector<float> final_norm_gain;   // [d]
    std::vector<float> lm_head;           // [d * vocab]
    std::vector<QuantizedBlock> blocks;

    ActQuantPolicy act_policy() const { return {act_bits}; }
    // Dequantizes every weight into a runnable model (exact: codes are on-grid).
    Model to_eval_model() const;
};

Tensor qmodel_logits(const QuantizedModel& qm, std::span<const int> tokens);

} // namespace slq
