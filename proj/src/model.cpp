#include "slq/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <ostream>

namespace slq {

void ModelConfig::validate() const {
    if (vocab_size < 1) throw ConfigError("model: vocab_size must be >= 1");
    if (d_model < 1) throw ConfigError("model: d_model must be >= 1");
    if (n_heads < 1) throw ConfigError("model: n_heads must be >= 1");
    if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
    if ((d_model / n_heads) % 2 != 0) throw ConfigError("model: head width must be even for rope");
    if (n_layers < 1) throw ConfigError("model: n_layers must be >= 1");
    if (d_ff < 1) throw ConfigError("model: d_ff must be >= 1");
    if (max_seq < 1) throw ConfigError("model: max_seq must be >= 1");
}

std::vector<Tensor*> Block::linears() {
    return {&wq, &wk, &wv, &wo, &w_up, &w_gate, &w_down};
}

std::vector<Tensor*> Block::all_params() {
    return {&norm1_gain, &wq, &wk, &wv, &wo, &norm2_gain, &w_up, &w_gate, &w_down};
}

std::vector<Tensor*> Model::parameters() {
    std::vector<Tensor*> out;
    out.push_back(&embedding);
    for (Block& b : blocks)
        for (Tensor* t : b.all_params()) out.push_back(t);
    out.push_back(&final_norm_gain);
    out.push_back(&lm_head);
    return out;
}

Model Model::clone() const {
    Model m;
    m.config = config;
    m.vocab = vocab;
    m.embedding = embedding.clone();
    m.final_norm_gain = final_norm_gain.clone();
    m.lm_head = lm_head.clone();
    m.blocks.reserve(blocks.size());
    for (const Block& b : blocks) {
        Block c;
        c.norm1_gain = b.norm1_gain.clone();
        c.norm2_gain = b.norm2_gain.clone();
        c.wq = b.wq.clone();
        c.wk = b.wk.clone();
        c.wv = b.wv.clone();
        c.wo = b.wo.clone();
        c.w_up = b.w_up.clone();
        c.w_gate = b.w_gate.clone();
        c.w_down = b.w_down.clone();
        m.blocks.push_back(std::move(c));
    }
    return m;
}

Model init_model(const ModelConfig& config, std::vector<uint8_t> vocab) {
    ModelConfig cfg = config;
    if (cfg.vocab_size == 0) cfg.vocab_size = static_cast<int64_t>(vocab.size());
    cfg.validate();
    if (!vocab.empty() && static_cast<int64_t>(vocab.size()) != cfg.vocab_size)
        throw ConfigError("model: vocab byte list does not match vocab_size");

    Rng rng(cfg.seed);
    const float std_w = 0.02f;
    const int64_t d = cfg.d_model, ff = cfg.d_ff, v = cfg.vocab_size;

    Model m;
    m.config = cfg;
    m.vocab = std::move(vocab);
    m.embedding = rng.randn({v, d}, std_w);
    m.blocks.resize(static_cast<size_t>(cfg.n_layers));
    for (Block& b : m.blocks) {
        b.norm1_gain = Tensor::full({d}, 1.0f);
        b.norm2_gain = Tensor::full({d}, 1.0f);
        b.wq = rng.randn({d, d}, std_w);
        b.wk = rng.randn({d, d}, std_w);
        b.wv = rng.randn({d, d}, std_w);
        b.wo = rng.randn({d, d}, std_w);
        b.w_up = rng.randn({d, ff}, std_w);
        b.w_gate = rng.randn({d, ff}, std_w);
        b.w_down = rng.randn({ff, d}, std_w);
    }
    m.final_norm_gain = Tensor::full({d}, 1.0f);
    m.lm_head = rng.randn({d, v}, std_w);
    return m;
}

// ---------------------------------------------------------------------------
// tokenizer / corpus
// ---------------------------------------------------------------------------

CharVocab CharVocab::from_text(std::span<const char> text) {
    std::array<bool, 256> seen{};
    for (char c : text) seen[static_cast<uint8_t>(c)] = true;
    std::vector<uint8_t> bytes;
    for (int b = 0; b < 256; ++b)
        if (seen[static_cast<size_t>(b)]) bytes.push_back(static_cast<uint8_t>(b));
    return from_bytes(std::move(bytes));
}

CharVocab CharVocab::from_bytes(std::vector<uint8_t> bytes) {
    std::sort(bytes.begin(), bytes.end());
    bytes.erase(std::unique(bytes.begin(), bytes.end()), bytes.end());
    CharVocab v;
    v.bytes = std::move(bytes);
    v.to_id.fill(-1);
    for (size_t i = 0; i < v.bytes.size(); ++i) v.to_id[v.bytes[i]] = static_cast<int>(i);
    return v;
}

std::vector<int> CharVocab::encode(std::span<const char> text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (char c : text) {
        const int id = to_id[static_cast<uint8_t>(c)];
        if (id < 0)
            throw DomainError("tokenizer: byte " + std::to_string(static_cast<uint8_t>(c)) +
                              " not in vocabulary");
        ids.push_back(id);
    }
    return ids;
}

std::pair<CharVocab, TokenStream> load_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("corpus: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (text.empty()) throw ConfigError("corpus: file is empty: " + path);

    CharVocab vocab = CharVocab::from_text(text);
    TokenStream ts;
    ts.ids = vocab.encode(text);
    const int64_t n = static_cast<int64_t>(ts.ids.size());
    ts.train_end = n * 90 / 100;
    ts.calib_end = n * 95 / 100;
    return {std::move(vocab), std::move(ts)};
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

BlockIO plain_io(const Block& b) {
    BlockIO io;
    io.norm1_gain = b.norm1_gain;
    io.norm2_gain = b.norm2_gain;
    io.wq = b.wq;
    io.wk = b.wk;
    io.wv = b.wv;
    io.wo = b.wo;
    io.w_up = b.w_up;
    io.w_gate = b.w_gate;
    io.w_down = b.w_down;
    return io;
}

namespace {

Tensor site_input(const Tensor& x, const Tensor& alpha, const ActQuantPolicy& aq) {
    Tensor t = alpha.defined() ? div_cols(x, alpha) : x;
    return aq.active() ? fake_quant(t, aq.spec()) : t;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t n_heads) {
    const int64_t d = q.dim(1);
    const int64_t hd = d / n_heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    std::vector<Tensor> ctx_parts;
    ctx_parts.reserve(static_cast<size_t>(n_heads));
    for (int64_t h = 0; h < n_heads; ++h) {
        Tensor qh = slice_cols(q, h * hd, (h + 1) * hd);
        Tensor kh = slice_cols(k, h * hd, (h + 1) * hd);
        Tensor vh = slice_cols(v, h * hd, (h + 1) * hd);
        Tensor scores = mul_scalar(matmul(qh, transpose(kh)), scale);
        Tensor att = causal_softmax_rows(scores);
        ctx_parts.push_back(matmul(att, vh));
    }
    return concat_cols(ctx_parts);
}

} // namespace

Tensor block_forward(const BlockIO& io, const Tensor& x, const ModelConfig& cfg,
                     const ActQuantPolicy& aq) {
    // attention half
    Tensor a_norm = rmsnorm_rows(x, io.norm1_gain);
    Tensor a_in = site_input(a_norm, io.alpha_attn_in, aq);
    Tensor q = rope_rows(matmul(a_in, io.wq), static_cast<int>(cfg.n_heads));
    Tensor k = rope_rows(matmul(a_in, io.wk), static_cast<int>(cfg.n_heads));
    Tensor v = matmul(a_in, io.wv);
    Tensor ctx = attention(q, k, v, cfg.n_heads);
    Tensor o_in = site_input(ctx, io.alpha_attn_out, aq);
    Tensor h = add(x, matmul(o_in, io.wo));

    // mlp half
    Tensor m_norm = rmsnorm_rows(h, io.norm2_gain);
    Tensor m_in = site_input(m_norm, io.alpha_mlp_in, aq);
    Tensor up = matmul(m_in, io.w_up);
    Tensor gate = matmul(m_in, io.w_gate);
    Tensor act = mul(silu(gate), up);
    Tensor d_in = site_input(act, io.alpha_mlp_out, aq);
    return add(h, matmul(d_in, io.w_down));
}

Tensor model_forward(const Model& model, std::span<const int> tokens,
                     const std::set<int64_t>* capture_layers,
                     std::map<int64_t, Tensor>* captured, const ActQuantPolicy& aq) {
    if (tokens.empty()) throw ContractError("forward: empty token sequence");
    if (static_cast<int64_t>(tokens.size()) > model.config.max_seq)
        throw ContractError("forward: sequence length " + std::to_string(tokens.size()) +
                            " exceeds context " + std::to_string(model.config.max_seq));

    Tensor x = embedding_rows(model.embedding, tokens);
    for (size_t l = 0; l < model.blocks.size(); ++l) {
        if (capture_layers && captured && capture_layers->count(static_cast<int64_t>(l)))
            (*captured)[static_cast<int64_t>(l)] = x;
        x = block_forward(plain_io(model.blocks[l]), x, model.config, aq);
    }
    Tensor y = rmsnorm_rows(x, model.final_norm_gain);
    return matmul(y, model.lm_head);
}

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

PretrainResult pretrain(Model& model, const TokenStream& corpus, const PretrainConfig& cfg,
                        std::ostream* log) {
    if (cfg.seq_len > model.config.max_seq)
        throw ConfigError("pretrain: seq_len exceeds model context");
    const int64_t train_len = corpus.train_end;
    if (train_len < cfg.seq_len + 1)
        throw ConfigError("pretrain: corpus too short for requested sequence length");

    std::vector<Tensor*> params = model.parameters();
    for (Tensor* p : params) p->set_requires_grad(true);
    AdamWState opt;
    opt.init(params);

    Rng rng(cfg.seed);
    PretrainResult res;
    for (int64_t step = 0; step < cfg.steps; ++step) {
        for (Tensor* p : params) p->zero_grad();

        Tensor total;
        for (int64_t b = 0; b < cfg.batch; ++b) {
            const int64_t off =
                static_cast<int64_t>(rng.uniform_below(static_cast<uint64_t>(train_len - cfg.seq_len)));
            std::span<const int> inp(corpus.ids.data() + off, static_cast<size_t>(cfg.seq_len));
            std::span<const int> tgt(corpus.ids.data() + off + 1, static_cast<size_t>(cfg.seq_len));
            Tensor logits = model_forward(model, inp);
            Tensor loss = cross_entropy_rows(logits, tgt);
            total = (b == 0) ? loss : add(total, loss);
        }
        Tensor loss = mul_scalar(total, 1.0f / static_cast<float>(cfg.batch));
        const float loss_val = loss.item();
        if (!std::isfinite(loss_val))
            throw DomainError("pretrain: loss diverged at step " + std::to_string(step));

        autograd::backward(loss);
        adamw_step(params, opt, linear_decay_lr(cfg.lr, step, cfg.steps));

        res.final_loss = loss_val;
        res.steps_run = step + 1;
        if (log && cfg.log_every > 0 && (step + 1) % cfg.log_every == 0)
            (*log) << "step " << (step + 1) << "/" << cfg.steps << " loss " << loss_val << "\n";
    }

    for (Tensor* p : params) p->set_requires_grad(false);
    return res;
}

// ---------------------------------------------------------------------------
// calibration samples
// ---------------------------------------------------------------------------

CalibSet make_calibset(std::span<const int> tokens, int64_t c, int64_t k, uint64_t seed) {
    if (c < 1 || k < 1) throw ConfigError("calibset: c and k must be >= 1");
    const int64_t n = static_cast<int64_t>(tokens.size());
    const int64_t available = n - k + 1;
    if (available < c)
        throw ConfigError("calibset: " + std::to_string(c) + " samples of length " +
                          std::to_string(k) + " need " + std::to_string(c + k - 1) +
                          "+ tokens, corpus has " + std::to_string(n));

    // distinct offsets via partial Fisher-Yates
    std::vector<int64_t> offsets(static_cast<size_t>(available));
    for (int64_t i = 0; i < available; ++i) offsets[static_cast<size_t>(i)] = i;
    Rng rng(seed);
    CalibSet cs;
    cs.sample_len = k;
    cs.samples.reserve(static_cast<size_t>(c));
    for (int64_t i = 0; i < c; ++i) {
        const int64_t j =
            i + static_cast<int64_t>(rng.uniform_below(static_cast<uint64_t>(available - i)));
        std::swap(offsets[static_cast<size_t>(i)], offsets[static_cast<size_t>(j)]);
        const int64_t off = offsets[static_cast<size_t>(i)];
        cs.samples.emplace_back(tokens.begin() + off, tokens.begin() + off + k);
    }
    return cs;
}

// ---------------------------------------------------------------------------
// checkpoint io
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'S', 'L', 'Q', 'M'};
constexpr uint32_t kCkptVersion = 1;

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * 4));
}

void read_tensor(std::istream& is, Tensor& t) {
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * 4));
}

template <typename F>
void for_each_checkpoint_tensor(Model& m, F&& f) {
    f(m.embedding);
    for (Block& b : m.blocks) {
        f(b.norm1_gain);
        f(b.wq);
        f(b.wk);
        f(b.wv);
        f(b.wo);
        f(b.norm2_gain);
        f(b.w_up);
        f(b.w_gate);
        f(b.w_down);
    }
    f(m.final_norm_gain);
    f(m.lm_head);
}

} // namespace

void save_checkpoint(const Model& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("checkpoint: cannot write " + path);
    os.write(kCkptMagic, 4);
    write_u32(os, kCkptVersion);
    write_u64(os, static_cast<uint64_t>(model.config.vocab_size));
    write_u64(os, static_cast<uint64_t>(model.config.d_model));
    write_u64(os, static_cast<uint64_t>(model.config.n_heads));
    write_u64(os, static_cast<uint64_t>(model.config.n_layers));
    write_u64(os, static_cast<uint64_t>(model.config.d_ff));
    write_u64(os, static_cast<uint64_t>(model.config.max_seq));
    write_u64(os, model.config.seed);
    write_u32(os, static_cast<uint32_t>(model.vocab.size()));
    os.write(reinterpret_cast<const char*>(model.vocab.data()),
             static_cast<std::streamsize>(model.vocab.size()));
    Model& m = const_cast<Model&>(model);
    for_each_checkpoint_tensor(m, [&os](Tensor& t) { write_tensor(os, t); });
    if (!os) throw ConfigError("checkpoint: write failed for " + path);
}

Model load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("checkpoint: cannot open " + path);
    char magic[4] = {};
    is.read(magic, 4);
    if (std::memcmp(magic, kCkptMagic, 4) != 0)
        throw ConfigError("checkpoint: bad magic in " + path);
    const uint32_t version = read_u32(is);
    if (version != kCkptVersion)
        throw ConfigError("checkpoint: unsupported version " + std::to_string(version));

    ModelConfig cfg;
    cfg.vocab_size = static_cast<int64_t>(read_u64(is));
    cfg.d_model = static_cast<int64_t>(read_u64(is));
    cfg.n_heads = static_cast<int64_t>(read_u64(is));
    cfg.n_layers = static_cast<int64_t>(read_u64(is));
    cfg.d_ff = static_cast<int64_t>(read_u64(is));
    cfg.max_seq = static_cast<int64_t>(read_u64(is));
    cfg.seed = read_u64(is);
    cfg.validate();

    const uint32_t vocab_len = read_u32(is);
    if (vocab_len != cfg.vocab_size)
        throw ConfigError("checkpoint: vocab table does not match vocab_size");
    std::vector<uint8_t> vocab(vocab_len);
    is.read(reinterpret_cast<char*>(vocab.data()), vocab_len);

    Model m = init_model(cfg, std::move(vocab));
    for_each_checkpoint_tensor(m, [&is](Tensor& t) { read_tensor(is, t); });
    if (!is) throw ConfigError("checkpoint: truncated file " + path);
    // shape consistency is implied by init_model; verify payload is finite
    for (Tensor* p : m.parameters())
        for (float v : p->values())
            if (!std::isfinite(v)) throw DomainError("checkpoint: non-finite weight in " + path);
    return m;
}

} // namespace slq
