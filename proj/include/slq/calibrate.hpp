#pragma once

// Sequential window-by-window calibration: minimizes the window MSE
//   || F(W, X) - F(W_hat, X_hat) ||^2
// over the schedule's windows, optimizing channel scales and LoRA factors
// with AdamW, committing each block after its last containing window.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "slq/model.hpp"
#include "slq/qmodel.hpp"
#include "slq/schedule.hpp"
#include "slq/transforms.hpp"

namespace slq {

enum class TargetStream : uint8_t { quantized = 0, fp = 1 };

struct CalibConfig {
    int weight_bits = 4;
    int act_bits = 4;                  // 16 -> weight-only
    Granularity weight_granularity = Granularity::per_channel;
    int64_t group_size = 0;            // group_wise only
    int64_t epochs = 0;                // 0 -> 20, or 60 when weight_bits == 2
    int64_t batch_size = 4;
    float lr_scale = 1e-3f;
    float lr_lora = 1e-4f;
    int64_t lora_rank = 4;
    uint64_t seed = 0;
    TargetStream target_stream = TargetStream::quantized;

    int64_t resolved_epochs() const { return epochs > 0 ? epochs : (weight_bits == 2 ? 60 : 20); }
    ActQuantPolicy act_policy() const { return {act_bits}; }
    QuantSpec weight_spec() const;
    void validate() const;
};

struct WindowLossRow {
    int64_t window_id = 0;
    Region region = Region::fssw;
    int64_t stage = 0;    // 1-based
    int64_t epoch = 0;    // 1-based
    double loss = 0.0;
};

void write_loss_log_csv(const std::string& path, const std::vector<WindowLossRow>& rows);

struct PipelineResult {
    QuantizedModel artifact;
    std::vector<WindowLossRow> loss_log;
};

// Exposed as a class so tests can drive window_loss and inspect state.
class Pipeline {
public:
    Pipeline(const Model& model, const CalibSet& calib, const CalibConfig& cfg);

    // Eq.1 objective for one window at the given intra-layer stage fraction,
    // summed over the given calibration samples. Graph-tracked.
    Tensor window_loss(const Window& window, double stage_fraction,
                       std::span<const int64_t> sample_idx);

    void quantize_window(const Window& window, const WindowSchedule& schedule,
                         std::vector<WindowLossRow>* log);

    QuantizedModel finish();   // all blocks must be committed

    int64_t committed_prefix() const { return committed_prefix_; }
    const BlockParams& block_params(int64_t l) const { return params_[static_cast<size_t>(l)]; }
    BlockParams& block_params_mut(int64_t l) { return params_[static_cast<size_t>(l)]; }

private:
    Tensor loss_for_sample(const Window& window, std::span<const BlockIO> ios, int64_t sample,
                           const Tensor* cached_target);
    std::vector<BlockIO> window_ios(const Window& window, double stage_fraction) const;
    Tensor fp_window_output(const Window& window, const Tensor& input) const;
    BlockIO calib_io(int64_t layer, double stage_fraction) const;
    void commit_block(int64_t layer);
    void advance_caches();

    Model original_;
    CalibSet calib_;
    CalibConfig cfg_;
    std::vector<BlockParams> params_;
    std::vector<AdamWState> scale_opt_, lora_opt_;
    std::vector<Block> eval_blocks_;          // committed, absorbed, dequantized
    std::vector<QuantizedBlock> qblocks_;     // committed codes + frozen params
    std::vector<bool> committed_;
    int64_t committed_prefix_ = 0;
    int64_t cache_prefix_ = 0;                // caches sit at this block boundary
    std::vector<Tensor> x_quant_, x_fp_;      // per sample, at cache_prefix_
};

PipelineResult run_pipeline(const Model& model, const WindowSchedule& schedule,
                            const CalibSet& calib, const CalibConfig& cfg);

// Round-to-nearest: no learnable params, weights frozen from min-max directly.
QuantizedModel run_rtn(const Model& model, const CalibConfig& cfg);

enum class BaselineKind : uint8_t { rtn = 0, layerwise = 1, blockwise = 2, fixed_sliding = 3 };

BaselineKind baseline_kind_from_name(const std::string& name);
const char* baseline_kind_name(BaselineKind k);

// rtn ignores schedule knobs; layerwise/blockwise use one-block windows;
// fixed_sliding sweeps a fixed window {s, i} across all layers.
PipelineResult run_baseline(BaselineKind kind, const Model& model, const CalibSet& calib,
                            const CalibConfig& cfg, int64_t s = 2, int64_t i = 1);

} // namespace slq
