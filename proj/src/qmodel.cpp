#include "slq/qmodel.hpp"

namespace slq {

Model QuantizedModel::to_eval_model() const {
    Model m;
    m.config = config;
    m.vocab = vocab;
    const int64_t d = config.d_model, v = config.vocab_size;
    m.embedding = Tensor::from_data({v, d}, embedding);
    m.final_norm_gain = Tensor::from_data({d}, final_norm_gain);
    m.lm_head = Tensor::from_data({d, v}, lm_head);
    m.blocks.reserve(blocks.size());
    for (const QuantizedBlock& qb : blocks) {
        Block b;
        b.norm1_gain = Tensor::from_data({d}, qb.norm1_gain);
        b.norm2_gain = Tensor::from_data({d}, qb.norm2_gain);
        Tensor* dst[7] = {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_gate, &b.w_down};
        for (int i = 0; i < 7; ++i) *dst[i] = dequantize(qb.linears[static_cast<size_t>(i)]);
        m.blocks.push_back(std::move(b));
    }
    return m;
}

Tensor qmodel_logits(const QuantizedModel& qm, std::span<const int> tokens) {
    autograd::NoGrad ng;
    const Model m = qm.to_eval_model();
    return model_forward(m, tokens, nullptr, nullptr, qm.act_policy());
}

} // namespace slq
