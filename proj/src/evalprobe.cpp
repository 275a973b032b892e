#include "slq/evalprobe.hpp"

#include <cmath>
#include <fstream>

namespace slq {

namespace {

// One pass over the stream in non-overlapping context windows; fixed-order
// accumulation so partitioning cannot change the result.
double nll_over_stream(std::span<const int> tokens, int64_t ctx,
                       const std::function<Tensor(std::span<const int>)>& logits_fn,
                       int64_t max_tokens) {
    int64_t n = static_cast<int64_t>(tokens.size());
    if (max_tokens > 0) n = std::min(n, max_tokens);
    if (n < 2) throw ContractError("perplexity: need at least two tokens");

    autograd::NoGrad ng;
    double total_nll = 0.0;
    int64_t count = 0;
    for (int64_t t0 = 0; t0 + 1 < n; t0 += ctx) {
        const int64_t len = std::min(ctx, n - 1 - t0);
        std::span<const int> inp(tokens.data() + t0, static_cast<size_t>(len));
        std::span<const int> tgt(tokens.data() + t0 + 1, static_cast<size_t>(len));
        Tensor logits = logits_fn(inp);
        Tensor ce = cross_entropy_rows(logits, tgt);
        total_nll += static_cast<double>(ce.item()) * static_cast<double>(len);
        count += len;
    }
    return total_nll / static_cast<double>(count);
}

} // namespace

double perplexity(const Model& model, std::span<const int> tokens, int64_t max_tokens,
                  const ActQuantPolicy& aq) {
    const double nll = nll_over_stream(
        tokens, model.config.max_seq,
        [&](std::span<const int> inp) {
            return model_forward(model, inp, nullptr, nullptr, aq);
        },
        max_tokens);
    return std::exp(nll);
}

double perplexity(const QuantizedModel& artifact, std::span<const int> tokens,
                  int64_t max_tokens) {
    const Model m = artifact.to_eval_model();
    return perplexity(m, tokens, max_tokens, artifact.act_policy());
}

double mixed_perplexity(const Model& fp_model, const std::vector<Block>& quantized_blocks,
                        const std::vector<bool>& quantized, const ActQuantPolicy& aq,
                        std::span<const int> tokens, int64_t max_tokens) {
    if (quantized.size() != fp_model.blocks.size() ||
        quantized_blocks.size() != fp_model.blocks.size())
        throw ContractError("mixed_perplexity: block lists must match layer count");

    auto forward = [&](std::span<const int> inp) {
        Tensor x = embedding_rows(fp_model.embedding, inp);
        for (size_t l = 0; l < fp_model.blocks.size(); ++l) {
            if (quantized[l]) {
                x = block_forward(plain_io(quantized_blocks[l]), x, fp_model.config, aq);
            } else {
                x = block_forward(plain_io(fp_model.blocks[l]), x, fp_model.config);
            }
        }
        Tensor y = rmsnorm_rows(x, fp_model.final_norm_gain);
        return matmul(y, fp_model.lm_head);
    };
    const double nll = nll_over_stream(tokens, fp_model.config.max_seq, forward, max_tokens);
    return std::exp(nll);
}

ProbeMethod probe_method_from_name(const std::string& name) {
    if (name == "rtn") return ProbeMethod::rtn;
    if (name == "calibrated") return ProbeMethod::calibrated;
    throw ConfigError("probe: unknown method '" + name + "'");
}

const char* probe_method_name(ProbeMethod m) {
    return m == ProbeMethod::rtn ? "rtn" : "calibrated";
}

namespace {

// RTN-quantized copy of one block: weights re-frozen from min-max, no transforms.
Block rtn_block(const Block& b, const QuantSpec& wspec) {
    Block out;
    out.norm1_gain = b.norm1_gain.clone();
    out.norm2_gain = b.norm2_gain.clone();
    const Tensor* src[7] = {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_gate, &b.w_down};
    Tensor* dst[7] = {&out.wq, &out.wk, &out.wv, &out.wo, &out.w_up, &out.w_gate, &out.w_down};
    for (int i = 0; i < 7; ++i) {
        const QuantParams qp = calc_params(*src[i], wspec);
        *dst[i] = dequantize(quantize(*src[i], qp, wspec));
    }
    return out;
}

// Single-block calibration on FP-stream inputs: one window {l}, full fraction.
Block calibrate_single_block(const Model& model, int64_t l, const CalibConfig& cfg,
                             const CalibSet& calib) {
    // capture the FP activations entering block l for every sample
    std::vector<Tensor> inputs;
    {
        autograd::NoGrad ng;
        std::set<int64_t> want{l};
        for (const std::vector<int>& sample : calib.samples) {
            std::map<int64_t, Tensor> cap;
            (void)model_forward(model, sample, &want, &cap);
            inputs.push_back(cap.at(l));
        }
    }
    const Block& b = model.blocks[static_cast<size_t>(l)];
    std::vector<Tensor> targets;
    {
        autograd::NoGrad ng;
        for (const Tensor& x : inputs)
            targets.push_back(block_forward(plain_io(b), x, model.config));
    }

    Rng rng(cfg.seed + static_cast<uint64_t>(l) * 7919u);
    BlockParams p = init_block_params(model.config, cfg.lora_rank, rng);
    AdamWState scale_opt, lora_opt;
    auto scales = p.scale_params();
    auto loras = p.lora_params();
    scale_opt.init(scales);
    lora_opt.init(loras);

    const QuantSpec wspec = cfg.weight_spec();
    const int64_t n_samples = static_cast<int64_t>(calib.samples.size());
    const int64_t n_batches = (n_samples + cfg.batch_size - 1) / cfg.batch_size;
    const int64_t epochs = cfg.resolved_epochs();
    const int64_t total_steps = epochs * n_batches;

    int64_t step = 0;
    for (int64_t epoch = 0; epoch < epochs; ++epoch) {
        for (int64_t bi = 0; bi < n_batches; ++bi) {
            const int64_t lo = bi * cfg.batch_size;
            const int64_t hi = std::min(lo + cfg.batch_size, n_samples);
            for (Tensor* t : scales) t->zero_grad();
            for (Tensor* t : loras) t->zero_grad();

            Tensor loss;
            for (int64_t s = lo; s < hi; ++s) {
                BlockIO io;
                io.norm1_gain = b.norm1_gain;
                io.norm2_gain = b.norm2_gain;
                io.alpha_attn_in = p.attn_in.alpha();
                io.alpha_attn_out = p.attn_out.alpha();
                io.alpha_mlp_in = p.mlp_in.alpha();
                io.alpha_mlp_out = p.mlp_out.alpha();
                io.wq = fake_quant(refined_weight(b.wq, io.alpha_attn_in, p.q), wspec);
                io.wk = fake_quant(refined_weight(b.wk, io.alpha_attn_in, p.k), wspec);
                io.wv = fake_quant(refined_weight(b.wv, io.alpha_attn_in, p.v), wspec);
                io.wo = fake_quant(refined_weight(b.wo, io.alpha_attn_out, p.o), wspec);
                io.w_up = fake_quant(refined_weight(b.w_up, io.alpha_mlp_in, p.up), wspec);
                io.w_gate = fake_quant(refined_weight(b.w_gate, io.alpha_mlp_in, p.gate), wspec);
                io.w_down = fake_quant(refined_weight(b.w_down, io.alpha_mlp_out, p.down), wspec);
                Tensor pred = block_forward(io, inputs[static_cast<size_t>(s)], model.config,
                                            cfg.act_policy());
                Tensor li = sum_sq(sub(pred, targets[static_cast<size_t>(s)]));
                loss = loss.defined() ? add(loss, li) : li;
            }
            if (!std::isfinite(loss.item()))
                throw DomainError("probe: non-finite loss calibrating block " + std::to_string(l));
            autograd::backward(loss);
            adamw_step(scales, scale_opt, linear_decay_lr(cfg.lr_scale, step, total_steps));
            adamw_step(loras, lora_opt, linear_decay_lr(cfg.lr_lora, step, total_steps));
            step += 1;
        }
    }

    p.set_learnable(false);
    p.committed = true;
    Block absorbed = absorb_block(b, p);
    return rtn_block(absorbed, wspec);   // freeze params from the refined weights
}

} // namespace

double probe_single_layer(const Model& checkpoint, int64_t l, const CalibConfig& cfg,
                          ProbeMethod method, const CalibSet* calib,
                          std::span<const int> eval_tokens, int64_t max_tokens) {
    if (l < 0 || l >= checkpoint.config.n_layers)
        throw ContractError("probe: layer index out of range");
    const QuantSpec wspec = cfg.weight_spec();
    std::vector<Block> qblocks(checkpoint.blocks.size());
    std::vector<bool> mask(checkpoint.blocks.size(), false);
    if (method == ProbeMethod::rtn) {
        qblocks[static_cast<size_t>(l)] = rtn_block(checkpoint.blocks[static_cast<size_t>(l)], wspec);
    } else {
        if (!calib) throw ContractError("probe: calibrated method needs a calibration set");
        qblocks[static_cast<size_t>(l)] = calibrate_single_block(checkpoint, l, cfg, *calib);
    }
    mask[static_cast<size_t>(l)] = true;
    return mixed_perplexity(checkpoint, qblocks, mask, cfg.act_policy(), eval_tokens, max_tokens);
}

double probe_prefix(const Model& checkpoint, int64_t l, const CalibConfig& cfg,
                    ProbeMethod method, const QuantizedModel* calibrated_artifact,
                    std::span<const int> eval_tokens, int64_t max_tokens) {
    if (l < 1 || l > checkpoint.config.n_layers)
        throw ContractError("probe: prefix length must be in [1, L]");
    const QuantSpec wspec = cfg.weight_spec();
    std::vector<Block> qblocks(checkpoint.blocks.size());
    std::vector<bool> mask(checkpoint.blocks.size(), false);
    Model artifact_model;
    if (method == ProbeMethod::calibrated) {
        if (!calibrated_artifact)
            throw ContractError("probe: calibrated prefix needs the pipeline artifact");
        artifact_model = calibrated_artifact->to_eval_model();
    }
    for (int64_t b = 0; b < l; ++b) {
        mask[static_cast<size_t>(b)] = true;
        if (method == ProbeMethod::rtn) {
            qblocks[static_cast<size_t>(b)] =
                rtn_block(checkpoint.blocks[static_cast<size_t>(b)], wspec);
        } else {
            qblocks[static_cast<size_t>(b)] = artifact_model.blocks[static_cast<size_t>(b)];
        }
    }
    return mixed_perplexity(checkpoint, qblocks, mask, cfg.act_policy(), eval_tokens, max_tokens);
}

void write_sensitivity_csv(const std::string& path, const std::string& curve,
                           const std::vector<SensitivityRow>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ConfigError("sensitivity: cannot write " + path);
    os << "curve,layer,perplexity,fp_reference,method,wbits,abits,seed\n";
    for (const SensitivityRow& r : rows)
        os << curve << "," << r.layer << "," << r.ppl << "," << r.fp_reference << "," << r.method
           << "," << r.weight_bits << "," << r.act_bits << "," << r.seed << "\n";
}

void write_gnuplot_script(const std::string& path, const std::string& single_csv,
                          const std::string& prefix_csv) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ConfigError("sensitivity: cannot write " + path);
    os << "set datafile separator ','\n"
       << "set key autotitle columnhead\n"
       << "set xlabel 'layer'\n"
       << "set ylabel 'perplexity'\n"
       << "set terminal pngcairo size 900,400\n"
       << "set output 'sensitivity.png'\n"
       << "set multiplot layout 1,2\n"
       << "set title 'single layer quantized'\n"
       << "plot '" << single_csv << "' using 2:3 with linespoints, '' using 2:4 with lines\n"
       << "set title 'first l layers quantized'\n"
       << "plot '" << prefix_csv << "' using 2:3 with linespoints, '' using 2:4 with lines\n"
       << "unset multiplot\n";
}

} // namespace slq
