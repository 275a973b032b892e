#pragma once

// Perplexity evaluation (non-overlapping context windows) and the
// layer-sensitivity probes: quantize one layer, or a prefix of layers,
// and measure the held-out perplexity against the FP reference.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "slq/calibrate.hpp"
#include "slq/model.hpp"
#include "slq/qmodel.hpp"

namespace slq {

// exp(mean token NLL), windows of model context length stepping by the
// context (each token after the first predicted exactly once).
// max_tokens < 0 evaluates the whole stream.
double perplexity(const Model& model, std::span<const int> tokens, int64_t max_tokens = -1,
                  const ActQuantPolicy& aq = {});
double perplexity(const QuantizedModel& artifact, std::span<const int> tokens,
                  int64_t max_tokens = -1);

// Forward where `quantized[l]` selects between quantized_blocks[l] (with
// per-token activation quantization) and the FP model's block l.
double mixed_perplexity(const Model& fp_model, const std::vector<Block>& quantized_blocks,
                        const std::vector<bool>& quantized, const ActQuantPolicy& aq,
                        std::span<const int> tokens, int64_t max_tokens = -1);

enum class ProbeMethod : uint8_t { rtn = 0, calibrated = 1 };

ProbeMethod probe_method_from_name(const std::string& name);
const char* probe_method_name(ProbeMethod m);

// Only block l quantized (rtn or single-window calibration on FP inputs).
double probe_single_layer(const Model& checkpoint, int64_t l, const CalibConfig& cfg,
                          ProbeMethod method, const CalibSet* calib,
                          std::span<const int> eval_tokens, int64_t max_tokens = -1);

// Blocks 0..l-1 quantized, rest FP; 1 <= l <= L. For method == calibrated,
// pass the full-pipeline artifact so l == L reproduces its perplexity.
double probe_prefix(const Model& checkpoint, int64_t l, const CalibConfig& cfg,
                    ProbeMethod method, const QuantizedModel* calibrated_artifact,
                    std::span<const int> eval_tokens, int64_t max_tokens = -1);

struct SensitivityRow {
    int64_t layer = 0;       // probed layer (single) or prefix length
    double ppl = 0.0;
    double fp_reference = 0.0;
    std::string method;
    int weight_bits = 4;
    int act_bits = 4;
    uint64_t seed = 0;
};

void write_sensitivity_csv(const std::string& path, const std::string& curve,
                           const std::vector<SensitivityRow>& rows);
void write_gnuplot_script(const std::string& path, const std::string& single_csv,
                          const std::string& prefix_csv);

} // namespace slq
