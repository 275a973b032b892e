#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "slq/calibrate.hpp"
#include "slq/evalprobe.hpp"
#include "test_util.hpp"

using namespace slq;

namespace {

const char* kCorpusPath = SLQ_SOURCE_DIR "/data/corpus.txt";

struct Fixture {
    CharVocab vocab;
    TokenStream stream;
    Model model;
    CalibSet calib;

    // small but real: 8 layers so PESW/PCSW regions exist, briefly pretrained
    explicit Fixture(int64_t layers = 8, int64_t steps = 600) {
        auto [v, s] = load_corpus(kCorpusPath);
        vocab = v;
        stream = std::move(s);
        ModelConfig cfg;
        cfg.vocab_size = vocab.size();
        cfg.d_model = 32;
        cfg.n_heads = 4;
        cfg.n_layers = layers;
        cfg.d_ff = 48;
        cfg.max_seq = 48;
        cfg.seed = 0;
        model = init_model(cfg, vocab.bytes);
        PretrainConfig pc;
        pc.steps = steps;
        pc.batch = 2;
        pc.seq_len = 48;
        pc.seed = 0;
        pretrain(model, stream, pc);
        calib = make_calibset(stream.calib(), 6, 32, 0);
    }
};

CalibConfig quick_cfg(int wbits, int abits, int epochs = 2) {
    CalibConfig cfg;
    cfg.weight_bits = wbits;
    cfg.act_bits = abits;
    cfg.epochs = epochs;
    cfg.batch_size = 3;
    cfg.seed = 0;
    return cfg;
}

const Fixture& fixture() {
    static Fixture f;
    return f;
}

} // namespace

TEST_CASE("window loss is zero when nothing is quantized") {
    const Fixture& f = fixture();

    // sixteen-bit weights and activations, identity transforms
    {
        Pipeline pipe(f.model, f.calib, quick_cfg(16, 16));
        Window w{0, 1, Region::pesw, 0};
        const int64_t idx[2] = {0, 1};
        Tensor loss = pipe.window_loss(w, 1.0, {idx, 2});
        // fp32 forward of a 2-block window; the fake-quant grid at b=16 is
        // ~1e-4 relative, squared and summed over ~3k outputs
        CHECK(loss.item() < 1e-5f * 3000);
        autograd::clear();
    }

    // stage fraction zero: bit-exact zero regardless of bit width
    {
        Pipeline pipe(f.model, f.calib, quick_cfg(4, 4));
        Window w{0, 0, Region::pesw, 0};
        const int64_t idx[1] = {0};
        Tensor loss = pipe.window_loss(w, 0.0, {idx, 1});
        CHECK(loss.item() == 0.0f);
        autograd::clear();
    }
}

TEST_CASE("window loss at initialization equals the independent RTN error") {
    const Fixture& f = fixture();
    Pipeline pipe(f.model, f.calib, quick_cfg(4, 4));
    Window w{0, 0, Region::pesw, 0};
    const int64_t idx[1] = {0};
    Tensor loss = pipe.window_loss(w, 1.0, {idx, 1});

    // independent oracle: fake-quantize block 0 with no learnable params
    // (alpha = 1 and B = 0 leave the transformed weights equal to the
    // originals, so initialization must reproduce plain RTN)
    autograd::NoGrad ng;
    const Block& b = f.model.blocks[0];
    Tensor x = embedding_rows(f.model.embedding, f.calib.samples[0]);
    Tensor target = block_forward(plain_io(b), x, f.model.config);

    const QuantSpec wspec = QuantSpec::weights_per_channel(4);
    BlockIO io = plain_io(b);
    io.wq = fake_quant(b.wq, wspec);
    io.wk = fake_quant(b.wk, wspec);
    io.wv = fake_quant(b.wv, wspec);
    io.wo = fake_quant(b.wo, wspec);
    io.w_up = fake_quant(b.w_up, wspec);
    io.w_gate = fake_quant(b.w_gate, wspec);
    io.w_down = fake_quant(b.w_down, wspec);
    Tensor pred = block_forward(io, x, f.model.config, ActQuantPolicy{4});
    const float oracle = sum_sq(sub(pred, target)).item();

    // identical up to the LoRA A init (B=0 makes A.B=0) and alpha=e^0=1
    CHECK(test::close(loss.item(), oracle, 1e-4f, 1e-5f));
}

TEST_CASE("window loss enforces the committed prefix") {
    const Fixture& f = fixture();
    Pipeline pipe(f.model, f.calib, quick_cfg(4, 4));
    Window w{2, 3, Region::fssw, 5};
    const int64_t idx[1] = {0};
    CHECK_THROWS_AS(pipe.window_loss(w, 1.0, {idx, 1}), ContractError);
}

TEST_CASE("parameters persist across windows and commits happen at last use") {
    const Fixture& f = fixture();
    CalibConfig cfg = quick_cfg(4, 16, 1);
    ScheduleConfig sc;
    sc.layers = 8;
    sc.shallow = 4;
    sc.deep = 4;
    sc.gamma = 0.5;
    const WindowSchedule sched = generate_schedule(sc);   // PESW x4 then PCSW x4

    Pipeline pipe(f.model, f.calib, cfg);
    std::vector<WindowLossRow> log;
    pipe.quantize_window(sched.windows[0], sched, &log);   // {0}
    CHECK(pipe.committed_prefix() == 0);
    const std::vector<float> alpha0(pipe.block_params(0).attn_in.log_alpha.data(),
                                    pipe.block_params(0).attn_in.log_alpha.data() +
                                        f.model.config.d_model);

    pipe.quantize_window(sched.windows[1], sched, &log);   // {0,1}
    // block 0 kept training from its previous state: values moved but were
    // not re-initialized (log-alpha of a fresh block is exactly zero)
    const float* alpha_now = pipe.block_params(0).attn_in.log_alpha.data();
    bool any_nonzero_start = false;
    for (int64_t i = 0; i < f.model.config.d_model; ++i)
        if (alpha0[static_cast<size_t>(i)] != 0.0f) any_nonzero_start = true;
    CHECK(any_nonzero_start);   // window {0} actually trained it
    bool continued = false;
    for (int64_t i = 0; i < f.model.config.d_model; ++i)
        if (alpha_now[i] != alpha0[static_cast<size_t>(i)]) continued = true;
    CHECK(continued);
    CHECK_FALSE(pipe.block_params(0).committed);

    pipe.quantize_window(sched.windows[2], sched, &log);   // {0,1,2}
    // {0,1,2,3} is the last window containing blocks 0..3 here (no fixed
    // sweep bridges into the deep region when L == L_s + L_d)
    pipe.quantize_window(sched.windows[3], sched, &log);
    CHECK(pipe.block_params(0).committed);
    CHECK(pipe.block_params(2).committed);
    CHECK(pipe.block_params(3).committed);
    CHECK_FALSE(pipe.block_params(4).committed);
    CHECK(pipe.committed_prefix() == 4);

    for (size_t wi = 4; wi < sched.windows.size(); ++wi)
        pipe.quantize_window(sched.windows[wi], sched, &log);
    CHECK(pipe.committed_prefix() == 8);
    QuantizedModel qm = pipe.finish();
    CHECK(qm.blocks.size() == 8);

    // the loss log covers every (window, stage, epoch) cell
    CHECK(log.size() == sched.windows.size() * 2 * 1);
}

TEST_CASE("sixteen-bit weights give an FP-equivalent artifact") {
    const Fixture& f = fixture();
    CalibConfig cfg = quick_cfg(16, 16, 1);
    const WindowSchedule sched = fixed_sliding_schedule(8, 2, 1);
    PipelineResult res = run_pipeline(f.model, sched, f.calib, cfg);

    autograd::NoGrad ng;
    std::vector<int> toks(f.stream.ids.begin() + f.stream.calib_end,
                          f.stream.ids.begin() + f.stream.calib_end + 32);
    Tensor fp = model_forward(f.model, toks);
    Tensor q = qmodel_logits(res.artifact, toks);
    // 16-bit rounding alone stays near 1e-4; AdamW jitter on the LoRA
    // factors (near-zero gradients still move ~lr per step) adds the rest
    CHECK(test::max_rel_diff(q, fp, 0.5f) < 1e-3f);
}

TEST_CASE("rtn baseline: sixteen-bit weights reproduce the model") {
    const Fixture& f = fixture();
    QuantizedModel qm = run_rtn(f.model, quick_cfg(16, 16));
    autograd::NoGrad ng;
    std::vector<int> toks(f.stream.ids.begin(), f.stream.ids.begin() + 24);
    Tensor fp = model_forward(f.model, toks);
    Tensor q = qmodel_logits(qm, toks);
    CHECK(test::max_rel_diff(q, fp, 0.5f) < 1e-4f);
}

TEST_CASE("baseline kinds map to the expected schedules") {
    CHECK(baseline_kind_from_name("rtn") == BaselineKind::rtn);
    CHECK(baseline_kind_from_name("fixed") == BaselineKind::fixed_sliding);
    CHECK_THROWS_AS(baseline_kind_from_name("???"), ConfigError);

    // fixed_sliding == generate_schedule(L_s=1, L_d=1) minus the end windows
    const WindowSchedule fixed = fixed_sliding_schedule(8, 2, 1);
    ScheduleConfig sc;
    sc.layers = 8;
    sc.shallow = 1;
    sc.deep = 1;
    const WindowSchedule full = generate_schedule(sc);
    REQUIRE(fixed.windows.size() + 2 == full.windows.size());
    for (size_t i = 0; i < fixed.windows.size(); ++i) {
        CHECK(fixed.windows[i].first == full.windows[i + 1].first);
        CHECK(fixed.windows[i].last == full.windows[i + 1].last);
    }
}

TEST_CASE("absorbed block with frozen params reproduces calibration-time outputs") {
    // calibration-time quantized forward: runtime alpha division, refined
    // weights fake-quantized with dynamic per-channel params
    const Fixture& f = fixture();
    const ModelConfig cfg = f.model.config;
    const Block& b = f.model.blocks[2];
    Rng rng(77);
    BlockParams p = init_block_params(cfg, 4, rng);
    for (Tensor* t : p.scale_params()) *t = rng.randn(t->shape(), 0.2f);
    for (Tensor* t : p.lora_params()) *t = rng.randn(t->shape(), 0.1f);
    p.committed = true;

    autograd::NoGrad ng;
    const QuantSpec wspec = QuantSpec::weights_per_channel(4);
    const ActQuantPolicy aq{4};
    Tensor x = embedding_rows(f.model.embedding, f.calib.samples[0]);

    BlockIO calib_io = transformed_io(b, p);
    Tensor* calib_w[7] = {&calib_io.wq, &calib_io.wk, &calib_io.wv, &calib_io.wo,
                          &calib_io.w_up, &calib_io.w_gate, &calib_io.w_down};
    for (Tensor* w : calib_w) *w = fake_quant(*w, wspec);
    Tensor calib_out = block_forward(calib_io, x, cfg, aq);

    // committed form: absorb first, then freeze params from the folded weights
    Block absorbed = absorb_block(b, p);
    Block eval = absorbed;
    Tensor* src[7] = {&absorbed.wq, &absorbed.wk, &absorbed.wv, &absorbed.wo,
                      &absorbed.w_up, &absorbed.w_gate, &absorbed.w_down};
    Tensor* dst[7] = {&eval.wq, &eval.wk, &eval.wv, &eval.wo, &eval.w_up, &eval.w_gate,
                      &eval.w_down};
    for (int i = 0; i < 7; ++i)
        *dst[i] = dequantize(quantize(*src[i], calc_params(*src[i], wspec), wspec));
    Tensor absorbed_out = block_forward(plain_io(eval), x, cfg, aq);

    CHECK(test::max_rel_diff(absorbed_out, calib_out, 0.05f) < 1e-5f);
}

TEST_CASE("fp target stream is exposed and changes the objective") {
    const Fixture& f = fixture();
    CalibConfig cfg = quick_cfg(4, 4, 1);

    CalibConfig fp_cfg = cfg;
    fp_cfg.target_stream = TargetStream::fp;
    const WindowSchedule sched = layerwise_schedule(8);
    PipelineResult a = run_pipeline(f.model, sched, f.calib, cfg);
    PipelineResult b = run_pipeline(f.model, sched, f.calib, fp_cfg);

    // block 0 sees identical inputs either way (the stream prefix is empty),
    // later windows see diverged targets once quantized blocks commit
    REQUIRE(a.loss_log.size() == b.loss_log.size());
    CHECK(a.loss_log[0].loss == b.loss_log[0].loss);
    bool diverged = false;
    for (size_t i = 0; i < a.loss_log.size(); ++i)
        if (a.loss_log[i].loss != b.loss_log[i].loss) diverged = true;
    CHECK(diverged);
    CHECK(std::isfinite(perplexity(b.artifact, f.stream.test(), 2048)));
}

TEST_CASE("pipeline is deterministic for a fixed seed") {
    const Fixture& f = fixture();
    CalibConfig cfg = quick_cfg(4, 4, 1);
    const WindowSchedule sched = layerwise_schedule(8);
    PipelineResult a = run_pipeline(f.model, sched, f.calib, cfg);
    PipelineResult b = run_pipeline(f.model, sched, f.calib, cfg);
    REQUIRE(a.artifact.blocks.size() == b.artifact.blocks.size());
    for (size_t l = 0; l < a.artifact.blocks.size(); ++l) {
        for (int i = 0; i < 7; ++i) {
            const QuantizedTensor& qa = a.artifact.blocks[l].linears[static_cast<size_t>(i)];
            const QuantizedTensor& qb = b.artifact.blocks[l].linears[static_cast<size_t>(i)];
            CHECK(qa.codes == qb.codes);
            CHECK(qa.params.step == qb.params.step);
            CHECK(qa.params.beta == qb.params.beta);
        }
    }
}

TEST_CASE("full W4A4 run: finite perplexity, loss log shape, window-loss improvement") {
    // At this fixture's scale RTN barely dents perplexity, so the hard
    // perplexity ordering lives in the acceptance suite on the bundled
    // 12-layer model. Here: the run completes, evaluates, logs every
    // (window, stage, epoch) cell, and reduces its own window losses.
    const Fixture& f = fixture();
    CalibConfig cfg = quick_cfg(4, 4, 6);
    const WindowSchedule sched = generate_schedule(ScheduleConfig{8, 4, 4, 2, 1, 0.5});
    PipelineResult slider = run_pipeline(f.model, sched, f.calib, cfg);

    std::span<const int> test = f.stream.test();
    const double ppl_slider = perplexity(slider.artifact, test, 4096);
    const double ppl_fp = perplexity(f.model, test, 4096);
    INFO("fp=", ppl_fp, " slider=", ppl_slider);
    CHECK(std::isfinite(ppl_slider));

    CHECK(slider.loss_log.size() == sched.windows.size() * 2 * 6);
    for (const WindowLossRow& r : slider.loss_log) {
        CHECK(std::isfinite(r.loss));
        CHECK(r.loss >= 0.0);
    }

    // final-stage trajectory per window; the >=90% improvement figure is a
    // default-budget property checked on the bundled model's run, here the
    // reduced budget (6 epochs, 6 samples) only has to stay sane in aggregate
    double agg_first = 0.0, agg_last = 0.0;
    int improved = 0, windows = 0;
    for (const Window& w : sched.windows) {
        double first = -1.0, last = -1.0;
        for (const WindowLossRow& r : slider.loss_log) {
            if (r.window_id != w.position) continue;
            if (r.stage == 2 && r.epoch == 1) first = r.loss;
            if (r.stage == 2 && r.epoch == 6) last = r.loss;
        }
        REQUIRE(first >= 0.0);
        REQUIRE(last >= 0.0);
        agg_first += first;
        agg_last += last;
        windows += 1;
        if (last <= first) improved += 1;
    }
    INFO("windows improved: ", improved, "/", windows, " aggregate ", agg_first, " -> ", agg_last);
    CHECK(improved * 2 >= windows);             // at least half improve even here
    CHECK(agg_last <= agg_first * 1.05);        // and nothing blows up
}
