#include "slq/transforms.hpp"

#include <cmath>

namespace slq {

Tensor ChannelScale::alpha() const { return slq::exp(log_alpha); }

Tensor ChannelScale::alpha_detached() const {
    autograd::NoGrad ng;
    return slq::exp(log_alpha.detached());
}

std::vector<Tensor*> BlockParams::scale_params() {
    return {&attn_in.log_alpha, &attn_out.log_alpha, &mlp_in.log_alpha, &mlp_out.log_alpha};
}

std::vector<Tensor*> BlockParams::lora_params() {
    return {&q.a, &q.b, &k.a, &k.b, &v.a, &v.b, &o.a, &o.b,
            &up.a, &up.b, &gate.a, &gate.b, &down.a, &down.b};
}

void BlockParams::set_learnable(bool on) {
    for (Tensor* t : scale_params()) t->set_requires_grad(on);
    for (Tensor* t : lora_params()) t->set_requires_grad(on);
}

namespace {

LoraDelta init_lora(int64_t n, int64_t m, int64_t rank, Rng& rng) {
    LoraDelta d;
    d.a = rng.randn({n, rank}, 0.01f);
    d.b = Tensor::zeros({rank, m});
    return d;
}

} // namespace

BlockParams init_block_params(const ModelConfig& cfg, int64_t rank, Rng& rng) {
    if (rank < 1) throw ConfigError("transforms: LoRA rank must be >= 1");
    const int64_t d = cfg.d_model, ff = cfg.d_ff;
    BlockParams p;
    p.attn_in = {Tensor::zeros({d}), "attn_in"};
    p.attn_out = {Tensor::zeros({d}), "attn_out"};
    p.mlp_in = {Tensor::zeros({d}), "mlp_in"};
    p.mlp_out = {Tensor::zeros({ff}), "mlp_out"};
    p.q = init_lora(d, d, rank, rng);
    p.k = init_lora(d, d, rank, rng);
    p.v = init_lora(d, d, rank, rng);
    p.o = init_lora(d, d, rank, rng);
    p.up = init_lora(d, ff, rank, rng);
    p.gate = init_lora(d, ff, rank, rng);
    p.down = init_lora(ff, d, rank, rng);
    p.set_learnable(true);
    return p;
}

std::pair<Tensor, Tensor> apply_transform(const Tensor& w, const Tensor& x, const Tensor& alpha,
                                          const LoraDelta& lora) {
    for (float v : alpha.values())
        if (v == 0.0f) throw DomainError("apply_transform: zero element in alpha");
    Tensor xt = div_cols(x, alpha);
    Tensor wt = refined_weight(w, alpha, lora);
    return {wt, xt};
}

Tensor refined_weight(const Tensor& w, const Tensor& alpha, const LoraDelta& lora) {
    return add(mul_rows(w, alpha), matmul(lora.a, lora.b));
}

Tensor quantized_layer_forward(const Tensor& w, const Tensor& x, const ChannelScale& scale,
                               const LoraDelta& lora, const QuantSpec& w_spec,
                               const ActQuantPolicy& a_policy) {
    Tensor alpha = scale.alpha();
    Tensor xt = div_cols(x, alpha);
    Tensor wt = refined_weight(w, alpha, lora);
    Tensor xq = a_policy.active() ? fake_quant(xt, a_policy.spec()) : xt;
    Tensor wq = fake_quant(wt, w_spec);
    return matmul(xq, wq);
}

Tensor absorb_linear(const Tensor& w, const Tensor& alpha, const LoraDelta& lora) {
    autograd::NoGrad ng;
    return refined_weight(w, alpha, lora);
}

void fold_activation_scale(Block& block, const std::string& site, const Tensor& alpha) {
    autograd::NoGrad ng;
    if (site == "attn_in") {
        block.norm1_gain = div(block.norm1_gain, alpha);
    } else if (site == "mlp_in") {
        block.norm2_gain = div(block.norm2_gain, alpha);
    } else if (site == "attn_out") {
        // context[:,j] is linear in V's column j, so 1/alpha folds into it
        block.wv = scale_axis(EwOp::div, block.wv, alpha, 1);
    } else if (site == "mlp_out") {
        // down input = silu(gate) * up; dividing the up factor is exact
        block.w_up = scale_axis(EwOp::div, block.w_up, alpha, 1);
    } else {
        throw ContractError("absorb: operator '" + site + "' has no foldable upstream parameters");
    }
}

Block absorb_block(const Block& original, const BlockParams& params) {
    if (!params.committed) throw ContractError("absorb: block params not committed");
    autograd::NoGrad ng;
    const Tensor a_in = params.attn_in.alpha_detached();
    const Tensor a_out = params.attn_out.alpha_detached();
    const Tensor m_in = params.mlp_in.alpha_detached();
    const Tensor m_out = params.mlp_out.alpha_detached();

    Block b;
    b.norm1_gain = original.norm1_gain.clone();
    b.norm2_gain = original.norm2_gain.clone();
    b.wq = absorb_linear(original.wq, a_in, params.q);
    b.wk = absorb_linear(original.wk, a_in, params.k);
    b.wv = absorb_linear(original.wv, a_in, params.v);
    b.wo = absorb_linear(original.wo, a_out, params.o);
    b.w_up = absorb_linear(original.w_up, m_in, params.up);
    b.w_gate = absorb_linear(original.w_gate, m_in, params.gate);
    b.w_down = absorb_linear(original.w_down, m_out, params.down);

    fold_activation_scale(b, "attn_in", a_in);
    fold_activation_scale(b, "attn_out", a_out);
    fold_activation_scale(b, "mlp_in", m_in);
    fold_activation_scale(b, "mlp_out", m_out);
    return b;
}

BlockIO transformed_io(const Block& original, const BlockParams& params) {
    autograd::NoGrad ng;
    BlockIO io;
    io.norm1_gain = original.norm1_gain;
    io.norm2_gain = original.norm2_gain;
    io.alpha_attn_in = params.attn_in.alpha_detached();
    io.alpha_attn_out = params.attn_out.alpha_detached();
    io.alpha_mlp_in = params.mlp_in.alpha_detached();
    io.alpha_mlp_out = params.mlp_out.alpha_detached();
    io.wq = absorb_linear(original.wq, io.alpha_attn_in, params.q);
    io.wk = absorb_linear(original.wk, io.alpha_attn_in, params.k);
    io.wv = absorb_linear(original.wv, io.alpha_attn_in, params.v);
    io.wo = absorb_linear(original.wo, io.alpha_attn_out, params.o);
    io.w_up = absorb_linear(original.w_up, io.alpha_mlp_in, params.up);
    io.w_gate = absorb_linear(original.w_gate, io.alpha_mlp_in, params.gate);
    io.w_down = absorb_linear(original.w_down, io.alpha_mlp_out, params.down);
    return io;
}

} // namespace slq
