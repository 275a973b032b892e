#pragma once

// Learnable channel scaling and low-rank weight refinement:
//   X~ = X / alpha,  W~ = W * alpha + A.B
// plus exact absorption of both into plain weights after calibration.
// alpha is optimized in log space so it stays positive.

#include <string>
#include <vector>

#include "slq/model.hpp"
#include "slq/quantizer.hpp"
#include "slq/tensor.hpp"

namespace slq {

struct ChannelScale {
    Tensor log_alpha;        // learnable, zeros -> alpha = 1
    std::string owner;       // attn_in / attn_out / mlp_in / mlp_out

    Tensor alpha() const;            // exp(log_alpha), tracked when learnable
    Tensor alpha_detached() const;   // plain values, no graph
};

struct LoraDelta {
    Tensor a;   // [n, r], small-normal init
    Tensor b;   // [r, m], zero init so A.B starts at 0
    int64_t rank() const { return a.dim(1); }
};

// Per-block learnable state: four channel scales (one per activation site)
// and seven LoRA pairs (q, k, v, o, up, gate, down).
struct BlockParams {
    ChannelScale attn_in, attn_out, mlp_in, mlp_out;
    LoraDelta q, k, v, o, up, gate, down;
    bool committed = false;

    std::vector<Tensor*> scale_params();   // 4 log-alpha vectors
    std::vector<Tensor*> lora_params();    // 14 factor matrices
    void set_learnable(bool on);
};

BlockParams init_block_params(const ModelConfig& cfg, int64_t rank, Rng& rng);

// X~ = X / alpha (columns), W~ = W * alpha (rows) + A.B.
// alpha here is the plain scale vector; zero entries are a domain error.
std::pair<Tensor, Tensor> apply_transform(const Tensor& w, const Tensor& x, const Tensor& alpha,
                                          const LoraDelta& lora);

// W~ = W * alpha(rows) + A.B with the graph tracked through alpha and A, B.
Tensor refined_weight(const Tensor& w, const Tensor& alpha, const LoraDelta& lora);

// fake_quant(X~) . fake_quant(W~); differentiable w.r.t. alpha, A, B via STE.
Tensor quantized_layer_forward(const Tensor& w, const Tensor& x, const ChannelScale& scale,
                               const LoraDelta& lora, const QuantSpec& w_spec,
                               const ActQuantPolicy& a_policy);

// W_final = W * alpha + A.B (no quantization; absorption identity).
Tensor absorb_linear(const Tensor& w, const Tensor& alpha, const LoraDelta& lora);

// Folds 1/alpha for the named activation site into the upstream producer:
//   attn_in -> norm1 gain, mlp_in -> norm2 gain,
//   attn_out -> V output columns, mlp_out -> Up output columns.
// Unknown sites have no foldable upstream parameters and raise ContractError.
void fold_activation_scale(Block& block, const std::string& site, const Tensor& alpha);

// Full-precision absorbed block: refined weights plus all four scale folds.
// Forward of the result equals the transformed block's forward exactly
// (up to float rounding); requires the params to be committed.
Block absorb_block(const Block& original, const BlockParams& params);

// Transformed-model view of a block (runtime alpha division, refined FP
// weights); reference point for absorption-exactness checks.
BlockIO transformed_io(const Block& original, const BlockParams& params);

} // namespace slq
