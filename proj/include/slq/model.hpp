#pragma once

// Desk-scale Llama-style decoder-only LM: rotary attention + SiLU-gated MLP,
// RMSNorm, no biases, char-level tokenizer. The quantization subject.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "slq/quantizer.hpp"
#include "slq/tensor.hpp"

namespace slq {

struct ModelConfig {
    int64_t vocab_size = 0;
    int64_t d_model = 128;
    int64_t n_heads = 4;
    int64_t n_layers = 12;
    int64_t d_ff = 344;
    int64_t max_seq = 128;
    uint64_t seed = 0;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// One decoder block: two RMSNorm gains plus seven linears, weights stored
// [in x out] so the forward is x * W.
struct Block {
    Tensor norm1_gain, norm2_gain;   // [d]
    Tensor wq, wk, wv, wo;           // [d, d]
    Tensor w_up, w_gate;             // [d, d_ff]
    Tensor w_down;                   // [d_ff, d]

    std::vector<Tensor*> linears();  // q, k, v, o, up, gate, down
    std::vector<Tensor*> all_params();
};

// Names and order of the seven linears; fixed across checkpoints and packs.
inline constexpr std::array<const char*, 7> kLinearNames = {"wq", "wk", "wv", "wo",
                                                            "w_up", "w_gate", "w_down"};

struct Model {
    ModelConfig config;
    std::vector<uint8_t> vocab;      // byte value per token id, sorted
    Tensor embedding;                // [vocab, d]
    std::vector<Block> blocks;
    Tensor final_norm_gain;          // [d]
    Tensor lm_head;                  // [d, vocab]

    std::vector<Tensor*> parameters();
    Model clone() const;
};

Model init_model(const ModelConfig& config, std::vector<uint8_t> vocab);

// ---------------------------------------------------------------------------
// tokenizer / corpus
// ---------------------------------------------------------------------------

struct CharVocab {
    std::vector<uint8_t> bytes;      // sorted unique bytes
    std::array<int, 256> to_id{};

    static CharVocab from_text(std::span<const char> text);
    static CharVocab from_bytes(std::vector<uint8_t> bytes);
    int64_t size() const { return static_cast<int64_t>(bytes.size()); }
    std::vector<int> encode(std::span<const char> text) const;   // throws on unknown byte
};

struct TokenStream {
    std::vector<int> ids;
    int64_t train_end = 0;   // [0, train_end) training
    int64_t calib_end = 0;   // [train_end, calib_end) calibration, rest is test

    std::span<const int> train() const { return {ids.data(), static_cast<size_t>(train_end)}; }
    std::span<const int> calib() const {
        return {ids.data() + train_end, static_cast<size_t>(calib_end - train_end)};
    }
    std::span<const int> test() const {
        return {ids.data() + calib_end, static_cast<size_t>(static_cast<int64_t>(ids.size()) - calib_end)};
    }
};

// Reads a UTF-8/byte text file, builds the char vocab and a 90/5/5 split.
std::pair<CharVocab, TokenStream> load_corpus(const std::string& path);

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

// Per-token activation fake-quantization policy; 16 bits means off (weight-only).
struct ActQuantPolicy {
    int bits = 16;
    bool active() const { return bits < 16; }
    QuantSpec spec() const { return QuantSpec::acts_per_token(bits); }
};

// Effective tensors for one block forward. The alpha tensors, when defined,
// divide the activation entering the matching linears (channel scaling).
struct BlockIO {
    Tensor norm1_gain, norm2_gain;
    Tensor wq, wk, wv, wo, w_up, w_gate, w_down;
    Tensor alpha_attn_in;    // shared by q, k, v
    Tensor alpha_attn_out;   // o
    Tensor alpha_mlp_in;     // up, gate
    Tensor alpha_mlp_out;    // down
};

BlockIO plain_io(const Block& b);

Tensor block_forward(const BlockIO& io, const Tensor& x, const ModelConfig& cfg,
                     const ActQuantPolicy& aq = {});

// Full forward; captures block inputs for the requested layers (layer l's
// capture is the activation entering block l; layer 0 is the embedding output).
Tensor model_forward(const Model& model, std::span<const int> tokens,
                     const std::set<int64_t>* capture_layers = nullptr,
                     std::map<int64_t, Tensor>* captured = nullptr,
                     const ActQuantPolicy& aq = {});

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

struct PretrainConfig {
    int64_t steps = 3000;
    int64_t batch = 4;
    int64_t seq_len = 128;
    float lr = 1e-3f;
    uint64_t seed = 0;
    int64_t log_every = 100;
};

struct PretrainResult {
    float final_loss = 0.0f;
    int64_t steps_run = 0;
};

PretrainResult pretrain(Model& model, const TokenStream& corpus, const PretrainConfig& cfg,
                        std::ostream* log = nullptr);

// ---------------------------------------------------------------------------
// calibration samples
// ---------------------------------------------------------------------------

struct CalibSet {
    std::vector<std::vector<int>> samples;   // c sequences of k tokens
    int64_t sample_len = 0;
};

// c distinct offsets drawn uniformly; deterministic under seed.
CalibSet make_calibset(std::span<const int> tokens, int64_t c, int64_t k, uint64_t seed);

// ---------------------------------------------------------------------------
// checkpoint file ("SLQM": header + raw little-endian float32 blobs)
// ---------------------------------------------------------------------------

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

} // namespace slq
