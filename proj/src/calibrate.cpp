#include "slq/calibrate.hpp"

#include <cmath>
#include <fstream>

namespace slq {

QuantSpec CalibConfig::weight_spec() const {
    if (weight_granularity == Granularity::group_wise)
        return QuantSpec::weights_group_wise(weight_bits, group_size);
    return QuantSpec::weights_per_channel(weight_bits);
}

void CalibConfig::validate() const {
    if (weight_bits < 2 || weight_bits > 16)
        throw ConfigError("calib: weight bits must be in [2,16]");
    if (act_bits < 2 || act_bits > 16) throw ConfigError("calib: act bits must be in [2,16]");
    if (weight_granularity != Granularity::per_channel &&
        weight_granularity != Granularity::group_wise)
        throw ConfigError("calib: weights are per_channel or group_wise");
    if (weight_granularity == Granularity::group_wise && group_size < 1)
        throw ConfigError("calib: group_size must be >= 1");
    if (epochs < 0) throw ConfigError("calib: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("calib: batch_size must be >= 1");
    if (!(lr_scale > 0.0f) || !(lr_lora > 0.0f)) throw ConfigError("calib: learning rates must be > 0");
    if (lora_rank < 1) throw ConfigError("calib: LoRA rank must be >= 1");
}

void write_loss_log_csv(const std::string& path, const std::vector<WindowLossRow>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ConfigError("loss log: cannot write " + path);
    os << "window_id,region,stage,epoch,loss\n";
    for (const WindowLossRow& r : rows)
        os << r.window_id << "," << region_name(r.region) << "," << r.stage << "," << r.epoch
           << "," << r.loss << "\n";
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

Pipeline::Pipeline(const Model& model, const CalibSet& calib, const CalibConfig& cfg)
    : original_(model.clone()), calib_(calib), cfg_(cfg) {
    cfg_.validate();
    const int64_t L = original_.config.n_layers;
    Rng rng(cfg_.seed);
    params_.reserve(static_cast<size_t>(L));
    for (int64_t l = 0; l < L; ++l)
        params_.push_back(init_block_params(original_.config, cfg_.lora_rank, rng));
    scale_opt_.resize(static_cast<size_t>(L));
    lora_opt_.resize(static_cast<size_t>(L));
    eval_blocks_.resize(static_cast<size_t>(L));
    qblocks_.resize(static_cast<size_t>(L));
    committed_.assign(static_cast<size_t>(L), false);

    // both streams start at the block-0 boundary: the embedding output
    autograd::NoGrad ng;
    x_quant_.reserve(calib_.samples.size());
    x_fp_.reserve(calib_.samples.size());
    for (const std::vector<int>& sample : calib_.samples) {
        Tensor x = embedding_rows(original_.embedding, sample);
        x_quant_.push_back(x);
        x_fp_.push_back(x);
    }
}

Tensor Pipeline::fp_window_output(const Window& window, const Tensor& input) const {
    Tensor t = input;
    for (int64_t l = window.first; l <= window.last; ++l)
        t = block_forward(plain_io(original_.blocks[static_cast<size_t>(l)]), t, original_.config);
    return t;
}

BlockIO Pipeline::calib_io(int64_t layer, double stage_fraction) const {
    const Block& b = original_.blocks[static_cast<size_t>(layer)];
    const BlockParams& p = params_[static_cast<size_t>(layer)];
    const QuantSpec wspec = cfg_.weight_spec();

    BlockIO io;
    io.norm1_gain = b.norm1_gain;
    io.norm2_gain = b.norm2_gain;
    io.alpha_attn_in = p.attn_in.alpha();
    io.alpha_attn_out = p.attn_out.alpha();
    io.alpha_mlp_in = p.mlp_in.alpha();
    io.alpha_mlp_out = p.mlp_out.alpha();

    auto eff = [&](const Tensor& w, const Tensor& alpha, const LoraDelta& lora) {
        Tensor wt = refined_weight(w, alpha, lora);
        const int64_t cols = std::llround(stage_fraction * static_cast<double>(w.dim(1)));
        return fake_quant_partial_cols(wt, wspec, std::min<int64_t>(cols, w.dim(1)));
    };
    io.wq = eff(b.wq, io.alpha_attn_in, p.q);
    io.wk = eff(b.wk, io.alpha_attn_in, p.k);
    io.wv = eff(b.wv, io.alpha_attn_in, p.v);
    io.wo = eff(b.wo, io.alpha_attn_out, p.o);
    io.w_up = eff(b.w_up, io.alpha_mlp_in, p.up);
    io.w_gate = eff(b.w_gate, io.alpha_mlp_in, p.gate);
    io.w_down = eff(b.w_down, io.alpha_mlp_out, p.down);
    return io;
}

Tensor Pipeline::loss_for_sample(const Window& window, std::span<const BlockIO> ios,
                                 int64_t sample, const Tensor* cached_target) {
    const Tensor& x_in = x_quant_[static_cast<size_t>(sample)];
    Tensor target;
    if (cached_target) {
        target = *cached_target;
    } else {
        autograd::NoGrad ng;
        const Tensor& t_in = (cfg_.target_stream == TargetStream::fp)
                                 ? x_fp_[static_cast<size_t>(sample)]
                                 : x_in;
        target = fp_window_output(window, t_in);
    }

    if (ios.empty()) {
        // nothing quantized: prediction path is the plain FP forward
        Tensor pred = fp_window_output(window, x_in);
        return sum_sq(sub(pred, target));
    }

    Tensor pred = x_in;
    for (int64_t l = window.first; l <= window.last; ++l)
        pred = block_forward(ios[static_cast<size_t>(l - window.first)], pred, original_.config,
                             cfg_.act_policy());
    return sum_sq(sub(pred, target));
}

// The effective tensors only change when the learnable params move, so one
// set per optimizer step is shared by every sample in the batch.
std::vector<BlockIO> Pipeline::window_ios(const Window& window, double stage_fraction) const {
    std::vector<BlockIO> ios;
    if (stage_fraction <= 0.0) return ios;
    ios.reserve(static_cast<size_t>(window.size()));
    for (int64_t l = window.first; l <= window.last; ++l)
        ios.push_back(calib_io(l, stage_fraction));
    return ios;
}

Tensor Pipeline::window_loss(const Window& window, double stage_fraction,
                             std::span<const int64_t> sample_idx) {
    if (window.first != committed_prefix_)
        throw ContractError("window_loss: window starts at " + std::to_string(window.first) +
                            " but committed prefix is " + std::to_string(committed_prefix_));
    if (window.last >= original_.config.n_layers)
        throw ContractError("window_loss: window exceeds layer count");

    const std::vector<BlockIO> ios = window_ios(window, stage_fraction);
    Tensor total;
    for (int64_t s : sample_idx) {
        Tensor li = loss_for_sample(window, ios, s, nullptr);
        total = total.defined() ? add(total, li) : li;
    }
    if (!total.defined()) throw ContractError("window_loss: empty batch");
    return total;
}

void Pipeline::quantize_window(const Window& window, const WindowSchedule& schedule,
                               std::vector<WindowLossRow>* log) {
    if (window.first != committed_prefix_)
        throw ContractError("quantize_window: schedule order violated at window " +
                            std::to_string(window.position));

    const int64_t n_samples = static_cast<int64_t>(calib_.samples.size());
    const int64_t n_batches = (n_samples + cfg_.batch_size - 1) / cfg_.batch_size;
    const int64_t epochs = cfg_.resolved_epochs();
    const int64_t stages = schedule.plan.stages();
    const int64_t total_steps = stages * epochs * n_batches;

    // the FP targets do not move while this window trains; compute them once
    std::vector<Tensor> targets;
    {
        autograd::NoGrad ng;
        targets.reserve(static_cast<size_t>(n_samples));
        for (int64_t s = 0; s < n_samples; ++s) {
            const Tensor& t_in = (cfg_.target_stream == TargetStream::fp)
                                     ? x_fp_[static_cast<size_t>(s)]
                                     : x_quant_[static_cast<size_t>(s)];
            targets.push_back(fp_window_output(window, t_in));
        }
    }

    std::vector<std::vector<Tensor*>> scale_groups, lora_groups;
    for (int64_t l = window.first; l <= window.last; ++l) {
        BlockParams& p = params_[static_cast<size_t>(l)];
        if (p.committed)
            throw ContractError("quantize_window: block " + std::to_string(l) +
                                " already committed");
        scale_groups.push_back(p.scale_params());
        lora_groups.push_back(p.lora_params());
        if (!scale_opt_[static_cast<size_t>(l)].initialized())
            scale_opt_[static_cast<size_t>(l)].init(scale_groups.back());
        if (!lora_opt_[static_cast<size_t>(l)].initialized())
            lora_opt_[static_cast<size_t>(l)].init(lora_groups.back());
    }

    int64_t step = 0;
    for (int64_t stage = 1; stage <= stages; ++stage) {
        const double fraction = schedule.plan.fractions[static_cast<size_t>(stage - 1)];
        for (int64_t epoch = 1; epoch <= epochs; ++epoch) {
            double epoch_loss = 0.0;
            for (int64_t b = 0; b < n_batches; ++b) {
                const int64_t lo = b * cfg_.batch_size;
                const int64_t hi = std::min(lo + cfg_.batch_size, n_samples);

                for (auto& g : scale_groups)
                    for (Tensor* t : g) t->zero_grad();
                for (auto& g : lora_groups)
                    for (Tensor* t : g) t->zero_grad();

                const std::vector<BlockIO> ios = window_ios(window, fraction);
                Tensor loss;
                for (int64_t s = lo; s < hi; ++s) {
                    Tensor li = loss_for_sample(window, ios, s, &targets[static_cast<size_t>(s)]);
                    loss = loss.defined() ? add(loss, li) : li;
                }
                const double loss_val = static_cast<double>(loss.item());
                if (!std::isfinite(loss_val))
                    throw DomainError("calibrate: non-finite loss in window " +
                                      std::to_string(window.position) + " stage " +
                                      std::to_string(stage));
                autograd::backward(loss);

                const float lr_s = linear_decay_lr(cfg_.lr_scale, step, total_steps);
                const float lr_l = linear_decay_lr(cfg_.lr_lora, step, total_steps);
                for (size_t gi = 0; gi < scale_groups.size(); ++gi) {
                    const int64_t l = window.first + static_cast<int64_t>(gi);
                    adamw_step(scale_groups[gi], scale_opt_[static_cast<size_t>(l)], lr_s);
                    adamw_step(lora_groups[gi], lora_opt_[static_cast<size_t>(l)], lr_l);
                }
                step += 1;
                epoch_loss += loss_val;
            }
            if (log)
                log->push_back({window.position, window.region, stage, epoch,
                                epoch_loss / static_cast<double>(n_batches)});
        }
    }

    for (int64_t l = window.first; l <= window.last; ++l)
        if (schedule.last_window_of(l) == window.position) commit_block(l);
    advance_caches();
}

void Pipeline::commit_block(int64_t layer) {
    BlockParams& p = params_[static_cast<size_t>(layer)];
    p.set_learnable(false);
    p.committed = true;

    // materialize the absorbed block and freeze its weight quantizer params
    Block absorbed = absorb_block(original_.blocks[static_cast<size_t>(layer)], p);
    const QuantSpec wspec = cfg_.weight_spec();

    QuantizedBlock qb;
    qb.norm1_gain.assign(absorbed.norm1_gain.data(),
                         absorbed.norm1_gain.data() + absorbed.norm1_gain.numel());
    qb.norm2_gain.assign(absorbed.norm2_gain.data(),
                         absorbed.norm2_gain.data() + absorbed.norm2_gain.numel());

    Block eval = absorbed;
    Tensor* src[7] = {&absorbed.wq, &absorbed.wk, &absorbed.wv, &absorbed.wo,
                      &absorbed.w_up, &absorbed.w_gate, &absorbed.w_down};
    Tensor* dst[7] = {&eval.wq, &eval.wk, &eval.wv, &eval.wo, &eval.w_up, &eval.w_gate,
                      &eval.w_down};
    for (int i = 0; i < 7; ++i) {
        const QuantParams qp = calc_params(*src[i], wspec);
        qb.linears[static_cast<size_t>(i)] = quantize(*src[i], qp, wspec);
        *dst[i] = dequantize(qb.linears[static_cast<size_t>(i)]);
    }
    eval_blocks_[static_cast<size_t>(layer)] = std::move(eval);
    qblocks_[static_cast<size_t>(layer)] = std::move(qb);
    committed_[static_cast<size_t>(layer)] = true;

    while (committed_prefix_ < original_.config.n_layers &&
           committed_[static_cast<size_t>(committed_prefix_)])
        committed_prefix_ += 1;
}

void Pipeline::advance_caches() {
    autograd::NoGrad ng;
    while (cache_prefix_ < committed_prefix_) {
        const Block& evalb = eval_blocks_[static_cast<size_t>(cache_prefix_)];
        const Block& origb = original_.blocks[static_cast<size_t>(cache_prefix_)];
        for (size_t s = 0; s < calib_.samples.size(); ++s) {
            x_quant_[s] = block_forward(plain_io(evalb), x_quant_[s], original_.config,
                                        cfg_.act_policy());
            x_fp_[s] = block_forward(plain_io(origb), x_fp_[s], original_.config);
        }
        cache_prefix_ += 1;
    }
}

QuantizedModel Pipeline::finish() {
    if (committed_prefix_ != original_.config.n_layers)
        throw ContractError("pipeline: only " + std::to_string(committed_prefix_) + " of " +
                            std::to_string(original_.config.n_layers) + " blocks committed");
    QuantizedModel qm;
    qm.config = original_.config;
    qm.vocab = original_.vocab;
    qm.weight_bits = cfg_.weight_bits;
    qm.act_bits = cfg_.act_bits;
    qm.weight_granularity = cfg_.weight_granularity;
    qm.group_size = cfg_.group_size;
    qm.embedding.assign(original_.embedding.data(),
                        original_.embedding.data() + original_.embedding.numel());
    qm.final_norm_gain.assign(original_.final_norm_gain.data(),
                              original_.final_norm_gain.data() + original_.final_norm_gain.numel());
    qm.lm_head.assign(original_.lm_head.data(),
                      original_.lm_head.data() + original_.lm_head.numel());
    qm.blocks = std::move(qblocks_);
    return qm;
}

// ---------------------------------------------------------------------------
// entry points
// ---------------------------------------------------------------------------

PipelineResult run_pipeline(const Model& model, const WindowSchedule& schedule,
                            const CalibSet& calib, const CalibConfig& cfg) {
    if (schedule.layers != model.config.n_layers)
        throw ConfigError("pipeline: schedule covers " + std::to_string(schedule.layers) +
                          " layers, model has " + std::to_string(model.config.n_layers));
    Pipeline pipe(model, calib, cfg);
    PipelineResult res;
    for (const Window& w : schedule.windows) pipe.quantize_window(w, schedule, &res.loss_log);
    res.artifact = pipe.finish();
    return res;
}

QuantizedModel run_rtn(const Model& model, const CalibConfig& cfg) {
    cfg.validate();
    const QuantSpec wspec = cfg.weight_spec();
    QuantizedModel qm;
    qm.config = model.config;
    qm.vocab = model.vocab;
    qm.weight_bits = cfg.weight_bits;
    qm.act_bits = cfg.act_bits;
    qm.weight_granularity = cfg.weight_granularity;
    qm.group_size = cfg.group_size;
    qm.embedding.assign(model.embedding.data(), model.embedding.data() + model.embedding.numel());
    qm.final_norm_gain.assign(model.final_norm_gain.data(),
                              model.final_norm_gain.data() + model.final_norm_gain.numel());
    qm.lm_head.assign(model.lm_head.data(), model.lm_head.data() + model.lm_head.numel());
    qm.blocks.reserve(model.blocks.size());
    for (const Block& b : model.blocks) {
        QuantizedBlock qb;
        qb.norm1_gain.assign(b.norm1_gain.data(), b.norm1_gain.data() + b.norm1_gain.numel());
        qb.norm2_gain.assign(b.norm2_gain.data(), b.norm2_gain.data() + b.norm2_gain.numel());
        const Tensor* src[7] = {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_gate, &b.w_down};
        for (int i = 0; i < 7; ++i) {
            const QuantParams qp = calc_params(*src[i], wspec);
            qb.linears[static_cast<size_t>(i)] = quantize(*src[i], qp, wspec);
        }
        qm.blocks.push_back(std::move(qb));
    }
    return qm;
}

BaselineKind baseline_kind_from_name(const std::string& name) {
    if (name == "rtn") return BaselineKind::rtn;
    if (name == "layerwise") return BaselineKind::layerwise;
    if (name == "blockwise") return BaselineKind::blockwise;
    if (name == "fixed") return BaselineKind::fixed_sliding;
    if (name == "fixed_sliding") return BaselineKind::fixed_sliding;
    throw ConfigError("baseline: unknown kind '" + name + "'");
}

const char* baseline_kind_name(BaselineKind k) {
    switch (k) {
        case BaselineKind::rtn: return "rtn";
        case BaselineKind::layerwise: return "layerwise";
        case BaselineKind::blockwise: return "blockwise";
        case BaselineKind::fixed_sliding: return "fixed_sliding";
    }
    return "?";
}

PipelineResult run_baseline(BaselineKind kind, const Model& model, const CalibSet& calib,
                            const CalibConfig& cfg, int64_t s, int64_t i) {
    PipelineResult res;
    switch (kind) {
        case BaselineKind::rtn:
            res.artifact = run_rtn(model, cfg);
            return res;
        case BaselineKind::layerwise:
        case BaselineKind::blockwise:
            // one transformer block per window either way at this scale
            return run_pipeline(model, layerwise_schedule(model.config.n_layers), calib, cfg);
        case BaselineKind::fixed_sliding:
            return run_pipeline(model, fixed_sliding_schedule(model.config.n_layers, s, i), calib,
                                cfg);
    }
    throw ConfigError("baseline: unknown kind");
}

} // namespace slq
