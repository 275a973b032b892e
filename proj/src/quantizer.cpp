#include "slq/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace slq {

const char* granularity_name(Granularity g) {
    switch (g) {
        case Granularity::per_tensor: return "per_tensor";
        case Granularity::per_channel: return "per_channel";
        case Granularity::per_token: return "per_token";
        case Granularity::group_wise: return "group_wise";
    }
    return "?";
}

void QuantSpec::validate(const Shape& shape) const {
    if (bits < 2 || bits > 16)
        throw ConfigError("quant spec: bits must be in [2,16], got " + std::to_string(bits));
    if (epsilon_step <= 0.0f) throw ConfigError("quant spec: epsilon_step must be > 0");
    if (granularity == Granularity::per_tensor) return;
    if (shape.size() != 2)
        throw ConfigError(std::string("quant spec: ") + granularity_name(granularity) +
                          " requires a 2-D tensor, got " + shape_str(shape));
    if (axis != 0 && axis != 1) throw ConfigError("quant spec: axis must be 0 or 1");
    if (granularity == Granularity::group_wise) {
        const int64_t grouped_extent = shape[static_cast<size_t>(1 - axis)];
        if (group_size < 1)
            throw ConfigError("quant spec: group_size must be >= 1");
        if (grouped_extent % group_size != 0)
            throw ConfigError("quant spec: group_size " + std::to_string(group_size) +
                              " does not divide extent " + std::to_string(grouped_extent));
    }
}

QuantSpec QuantSpec::weights_per_channel(int bits) {
    QuantSpec s;
    s.bits = bits;
    s.granularity = Granularity::per_channel;
    s.axis = 1;
    s.range_grad = true;
    return s;
}

QuantSpec QuantSpec::weights_group_wise(int bits, int64_t group_size) {
    QuantSpec s;
    s.bits = bits;
    s.granularity = Granularity::group_wise;
    s.axis = 1;
    s.group_size = group_size;
    s.range_grad = true;
    return s;
}

QuantSpec QuantSpec::acts_per_token(int bits) {
    QuantSpec s;
    s.bits = bits;
    s.granularity = Granularity::per_token;
    s.axis = 0;
    s.range_grad = true;
    return s;
}

int64_t QuantParams::slice_of(int64_t row, int64_t col) const {
    switch (granularity) {
        case Granularity::per_tensor: return 0;
        case Granularity::per_channel:
        case Granularity::per_token: return axis == 0 ? row : col;
        case Granularity::group_wise: {
            if (axis == 1) {
                const int64_t groups = shape[0] / group_size;
                return col * groups + row / group_size;
            }
            const int64_t groups = shape[1] / group_size;
            return row * groups + col / group_size;
        }
    }
    return 0;
}

namespace {

int64_t slice_count_for(const Shape& shape, const QuantSpec& spec) {
    switch (spec.granularity) {
        case Granularity::per_tensor: return 1;
        case Granularity::per_channel:
        case Granularity::per_token: return shape[static_cast<size_t>(spec.axis)];
        case Granularity::group_wise:
            return shape[static_cast<size_t>(spec.axis)] *
                   (shape[static_cast<size_t>(1 - spec.axis)] / spec.group_size);
    }
    return 1;
}

// round half away from zero, the fixed tie rule for cross-platform bit-exactness
inline int64_t round_code(float x) { return std::llround(x); }

void check_params_match(const Tensor& z, const QuantParams& p, const QuantSpec& spec) {
    if (p.shape != z.shape())
        throw ContractError("quantize: params computed for " + shape_str(p.shape) +
                            ", tensor is " + shape_str(z.shape()));
    if (p.slice_count() != slice_count_for(z.shape(), spec))
        throw ContractError("quantize: params slice count does not match spec");
}

} // namespace

QuantParams calc_params(const Tensor& z, const QuantSpec& spec) {
    spec.validate(z.shape());
    if (z.numel() == 0) throw ContractError("calc_params: empty tensor");

    QuantParams p;
    p.shape = z.shape();
    p.granularity = spec.granularity;
    p.axis = spec.axis;
    p.group_size = spec.group_size;
    const int64_t slices = slice_count_for(z.shape(), spec);
    std::vector<float> mn(static_cast<size_t>(slices), std::numeric_limits<float>::max());
    std::vector<float> mx(static_cast<size_t>(slices), std::numeric_limits<float>::lowest());

    const float* pz = z.data();
    if (spec.granularity == Granularity::per_tensor) {
        const int64_t n = z.numel();
        for (int64_t i = 0; i < n; ++i) {
            mn[0] = std::min(mn[0], pz[i]);
            mx[0] = std::max(mx[0], pz[i]);
        }
    } else {
        const int64_t rows = z.dim(0), cols = z.dim(1);
        for (int64_t i = 0; i < rows; ++i) {
            for (int64_t j = 0; j < cols; ++j) {
                const int64_t s = p.slice_of(i, j);
                const float v = pz[i * cols + j];
                mn[static_cast<size_t>(s)] = std::min(mn[static_cast<size_t>(s)], v);
                mx[static_cast<size_t>(s)] = std::max(mx[static_cast<size_t>(s)], v);
            }
        }
    }

    const float levels = static_cast<float>(spec.max_code());
    p.step.resize(static_cast<size_t>(slices));
    p.beta.resize(static_cast<size_t>(slices));
    for (int64_t s = 0; s < slices; ++s) {
        const float range = mx[static_cast<size_t>(s)] - mn[static_cast<size_t>(s)];
        float step = range / levels;
        if (step < spec.epsilon_step) step = spec.epsilon_step;
        p.step[static_cast<size_t>(s)] = step;
        p.beta[static_cast<size_t>(s)] = round_code(mn[static_cast<size_t>(s)] / step);
    }
    return p;
}

QuantizedTensor quantize(const Tensor& z, const QuantParams& params, const QuantSpec& spec) {
    spec.validate(z.shape());
    check_params_match(z, params, spec);

    QuantizedTensor q;
    q.shape = z.shape();
    q.params = params;
    q.bits = spec.bits;
    q.codes.resize(static_cast<size_t>(z.numel()));
    const int64_t maxc = spec.max_code();
    const float* pz = z.data();

    if (spec.granularity == Granularity::per_tensor) {
        const float step = params.step[0];
        const int64_t beta = params.beta[0];
        const int64_t n = z.numel();
        for (int64_t i = 0; i < n; ++i) {
            const int64_t c = std::clamp<int64_t>(round_code(pz[i] / step) - beta, 0, maxc);
            q.codes[static_cast<size_t>(i)] = static_cast<uint32_t>(c);
        }
    } else {
        const int64_t rows = z.dim(0), cols = z.dim(1);
        for (int64_t i = 0; i < rows; ++i) {
            for (int64_t j = 0; j < cols; ++j) {
                const int64_t s = params.slice_of(i, j);
                const float step = params.step[static_cast<size_t>(s)];
                const int64_t beta = params.beta[static_cast<size_t>(s)];
                const int64_t c =
                    std::clamp<int64_t>(round_code(pz[i * cols + j] / step) - beta, 0, maxc);
                q.codes[static_cast<size_t>(i * cols + j)] = static_cast<uint32_t>(c);
            }
        }
    }
    return q;
}

Tensor dequantize(const QuantizedTensor& q) {
    Tensor out = Tensor::zeros(q.shape);
    float* po = out.data();
    const QuantParams& p = q.params;
    if (p.granularity == Granularity::per_tensor) {
        const float step = p.step[0];
        const int64_t beta = p.beta[0];
        for (size_t i = 0; i < q.codes.size(); ++i)
            po[i] = static_cast<float>(static_cast<int64_t>(q.codes[i]) + beta) * step;
    } else {
        const int64_t rows = q.shape[0], cols = q.shape[1];
        for (int64_t i = 0; i < rows; ++i) {
            for (int64_t j = 0; j < cols; ++j) {
                const int64_t s = p.slice_of(i, j);
                const int64_t code = static_cast<int64_t>(q.codes[static_cast<size_t>(i * cols + j)]);
                po[i * cols + j] =
                    static_cast<float>(code + p.beta[static_cast<size_t>(s)]) *
                    p.step[static_cast<size_t>(s)];
            }
        }
    }
    return out;
}

namespace {

// Per-slice locations of the range endpoints; carries the step gradient of
// the dynamic min-max quantizer back to the elements that define the range.
struct SliceExtrema {
    std::vector<int64_t> argmin, argmax;   // linear element indices
    std::vector<uint8_t> floored;          // epsilon-floored slices have no range gradient
};

// Min-max params over columns [0, col_limit); slices outside stay untouched
// with (step 1, beta 0). Matches calc_params exactly on the covered region.
QuantParams calc_params_limited(const Tensor& z, const QuantSpec& spec, int64_t col_limit,
                                SliceExtrema* ex) {
    const int64_t rows = z.ndim() == 2 ? z.dim(0) : 1;
    const int64_t cols = z.ndim() == 2 ? z.dim(1) : z.numel();

    QuantParams p;
    p.shape = z.shape();
    p.granularity = spec.granularity;
    p.axis = spec.axis;
    p.group_size = spec.group_size;
    const int64_t slices = slice_count_for(z.shape(), spec);
    std::vector<float> mn(static_cast<size_t>(slices), std::numeric_limits<float>::max());
    std::vector<float> mx(static_cast<size_t>(slices), std::numeric_limits<float>::lowest());
    std::vector<int64_t> amn(static_cast<size_t>(slices), -1);
    std::vector<int64_t> amx(static_cast<size_t>(slices), -1);

    const float* pz = z.data();
    for (int64_t i = 0; i < rows; ++i) {
        for (int64_t j = 0; j < col_limit; ++j) {
            const int64_t s = p.slice_of(i, j);
            const float v = pz[i * cols + j];
            if (v < mn[static_cast<size_t>(s)]) {
                mn[static_cast<size_t>(s)] = v;
                amn[static_cast<size_t>(s)] = i * cols + j;
            }
            if (v > mx[static_cast<size_t>(s)]) {
                mx[static_cast<size_t>(s)] = v;
                amx[static_cast<size_t>(s)] = i * cols + j;
            }
        }
    }

    const float levels = static_cast<float>(spec.max_code());
    p.step.assign(static_cast<size_t>(slices), 1.0f);
    p.beta.assign(static_cast<size_t>(slices), 0);
    if (ex) {
        ex->argmin.assign(static_cast<size_t>(slices), -1);
        ex->argmax.assign(static_cast<size_t>(slices), -1);
        ex->floored.assign(static_cast<size_t>(slices), 1);
    }
    for (int64_t s = 0; s < slices; ++s) {
        if (amn[static_cast<size_t>(s)] < 0) continue;   // slice entirely past col_limit
        const float range = mx[static_cast<size_t>(s)] - mn[static_cast<size_t>(s)];
        float step = range / levels;
        const bool floored = step < spec.epsilon_step;
        if (floored) step = spec.epsilon_step;
        p.step[static_cast<size_t>(s)] = step;
        p.beta[static_cast<size_t>(s)] = round_code(mn[static_cast<size_t>(s)] / step);
        if (ex) {
            ex->argmin[static_cast<size_t>(s)] = amn[static_cast<size_t>(s)];
            ex->argmax[static_cast<size_t>(s)] = amx[static_cast<size_t>(s)];
            ex->floored[static_cast<size_t>(s)] = floored ? 1 : 0;
        }
    }
    return p;
}

// Fused quantize-dequantize; fills `mask` with the straight-through gradient
// (1 in range, 0 clipped) when mask != nullptr.
void fakequant_fill(const float* pz, float* po, float* mask, int64_t rows, int64_t cols,
                    const QuantParams& p, int64_t maxc, int64_t col_limit) {
    for (int64_t i = 0; i < rows; ++i) {
        for (int64_t j = 0; j < cols; ++j) {
            const int64_t idx = i * cols + j;
            if (j >= col_limit) {
                po[idx] = pz[idx];
                if (mask) mask[idx] = 1.0f;
                continue;
            }
            const int64_t s = p.slice_of(i, j);
            const float step = p.step[static_cast<size_t>(s)];
            const int64_t beta = p.beta[static_cast<size_t>(s)];
            const int64_t pre = round_code(pz[idx] / step) - beta;
            const int64_t c = std::clamp<int64_t>(pre, 0, maxc);
            po[idx] = static_cast<float>(c + beta) * step;
            if (mask) mask[idx] = (pre >= 0 && pre <= maxc) ? 1.0f : 0.0f;
        }
    }
}

Tensor fake_quant_impl(const Tensor& z, const QuantParams& params, const QuantSpec& spec,
                       int64_t col_limit, std::shared_ptr<SliceExtrema> ex) {
    Tensor out = Tensor::zeros(z.shape());
    if (autograd::enabled() && z.tracked()) out.ensure_grad_buffer();

    const int64_t rows = z.ndim() == 2 ? z.dim(0) : 1;
    const int64_t cols = z.ndim() == 2 ? z.dim(1) : z.numel();
    const int64_t lim = (col_limit < 0) ? cols : col_limit;

    std::shared_ptr<std::vector<float>> mask;
    if (out.tracked()) mask = std::make_shared<std::vector<float>>(static_cast<size_t>(z.numel()));
    fakequant_fill(z.data(), out.data(), mask ? mask->data() : nullptr, rows, cols, params,
                   spec.max_code(), lim);

    if (out.tracked()) {
        Tensor zc = z, oc = out;
        if (!spec.range_grad || !ex) {
            autograd::record([zc, oc, mask]() mutable {
                if (!zc.tracked()) return;
                float* dz = zc.grad();
                const float* dout = oc.grad();
                const float* m = mask->data();
                const int64_t n = zc.numel();
                for (int64_t i = 0; i < n; ++i) dz[i] += dout[i] * m[i];
            });
        } else {
            // straight-through on the round, plus the derivative of the
            // min-max step routed to the slice's range endpoints:
            //   d out_i / d step = (out_i - z_i) / step,  d step / d z_max = 1/M
            QuantParams pc = params;
            const float levels = static_cast<float>(spec.max_code());
            autograd::record([zc, oc, mask, ex, pc, rows, cols, lim, levels]() mutable {
                if (!zc.tracked()) return;
                float* dz = zc.grad();
                const float* dout = oc.grad();
                const float* m = mask->data();
                const float* pz = zc.data();
                const float* po = oc.data();
                std::vector<float> ssum(pc.step.size(), 0.0f);
                for (int64_t i = 0; i < rows; ++i) {
                    for (int64_t j = 0; j < cols; ++j) {
                        const int64_t idx = i * cols + j;
                        dz[idx] += dout[idx] * m[idx];
                        if (j >= lim) continue;
                        const int64_t s = pc.slice_of(i, j);
                        if (ex->floored[static_cast<size_t>(s)]) continue;
                        if (m[idx] != 0.0f) {
                            ssum[static_cast<size_t>(s)] +=
                                dout[idx] * (po[idx] - pz[idx]) / pc.step[static_cast<size_t>(s)];
                        }
                    }
                }
                for (size_t s = 0; s < ssum.size(); ++s) {
                    if (ex->floored[s] || ex->argmax[s] < 0) continue;
                    const float g = ssum[s] / levels;
                    dz[ex->argmax[s]] += g;
                    dz[ex->argmin[s]] -= g;
                }
            });
        }
    }
    return out;
}

} // namespace

Tensor fake_quant(const Tensor& z, const QuantSpec& spec) {
    spec.validate(z.shape());
    if (z.numel() == 0) throw ContractError("fake_quant: empty tensor");
    const int64_t cols = z.ndim() == 2 ? z.dim(1) : z.numel();
    auto ex = std::make_shared<SliceExtrema>();
    const QuantParams params = calc_params_limited(z, spec, cols, ex.get());
    return fake_quant_impl(z, params, spec, -1, std::move(ex));
}

Tensor fake_quant_with_params(const Tensor& z, const QuantParams& params, const QuantSpec& spec) {
    spec.validate(z.shape());
    check_params_match(z, params, spec);
    // frozen params are constants, so only the masked identity applies
    return fake_quant_impl(z, params, spec, -1, nullptr);
}

Tensor fake_quant_partial_cols(const Tensor& z, const QuantSpec& spec, int64_t cols) {
    if (z.ndim() != 2) throw ContractError("fake_quant_partial_cols: tensor must be 2-D");
    if (cols < 0 || cols > z.dim(1))
        throw ContractError("fake_quant_partial_cols: column count out of range");
    if (cols == 0) return z;
    if (cols == z.dim(1)) return fake_quant(z, spec);
    spec.validate(z.shape());
    if (!(spec.granularity == Granularity::per_tensor ||
          (spec.axis == 1 && spec.granularity != Granularity::per_token)))
        throw ContractError("fake_quant_partial_cols: column-partial slicing needs a column-sliced spec");

    auto ex = std::make_shared<SliceExtrema>();
    const QuantParams p = calc_params_limited(z, spec, cols, ex.get());
    return fake_quant_impl(z, p, spec, cols, std::move(ex));
}

} // namespace slq
