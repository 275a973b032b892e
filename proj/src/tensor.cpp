#include "slq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace slq {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

static void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    Tensor t;
    const int64_t n = shape_numel(shape);
    require(n >= 0, "tensor: negative extent in " + shape_str(shape));
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<float>>(static_cast<size_t>(n), 0.0f);
    if (requires_grad) t.set_requires_grad(true);
    return t;
}

Tensor Tensor::full(Shape shape, float value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
}

Tensor Tensor::scalar(float value) {
    return full({1}, value);
}

Tensor Tensor::from_data(Shape shape, std::vector<float> values, bool requires_grad) {
    const int64_t n = shape_numel(shape);
    require(n == static_cast<int64_t>(values.size()),
            "tensor: shape " + shape_str(shape) + " does not match value count " +
                std::to_string(values.size()));
    for (float v : values) {
        if (!std::isfinite(v)) throw DomainError("tensor: non-finite value at construction");
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<float>>(std::move(values));
    if (requires_grad) t.set_requires_grad(true);
    return t;
}

void Tensor::set_requires_grad(bool on) {
    requires_grad_ = on;
    if (on) ensure_grad_buffer();
}

void Tensor::ensure_grad_buffer() {
    if (!grad_) grad_ = std::make_shared<std::vector<float>>(data_->size(), 0.0f);
}

void Tensor::zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0f);
}

float Tensor::item() const {
    require(numel() == 1, "tensor: item() on non-scalar " + shape_str(shape_));
    return (*data_)[0];
}

float Tensor::at(int64_t i, int64_t j) const {
    return (*data_)[static_cast<size_t>(i * shape_[1] + j)];
}

float& Tensor::mut(int64_t i, int64_t j) {
    return (*data_)[static_cast<size_t>(i * shape_[1] + j)];
}

Tensor Tensor::detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<float>>(*data_);
    return t;
}

// ---------------------------------------------------------------------------
// tape
// ---------------------------------------------------------------------------

namespace autograd {

namespace {
thread_local std::vector<std::function<void()>> g_tape;
thread_local bool g_enabled = true;
} // namespace

bool enabled() { return g_enabled; }

NoGrad::NoGrad() : prev_(g_enabled) { g_enabled = false; }
NoGrad::~NoGrad() { g_enabled = prev_; }

void record(std::function<void()> backward_fn) {
    if (g_enabled) g_tape.push_back(std::move(backward_fn));
}

size_t tape_size() { return g_tape.size(); }

void clear() { g_tape.clear(); }

void backward(Tensor& loss) {
    if (loss.numel() != 1) {
        clear();
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    if (loss.tracked()) {
        loss.grad()[0] = 1.0f;
        for (auto it = g_tape.rbegin(); it != g_tape.rend(); ++it) (*it)();
    }
    clear();
}

} // namespace autograd

namespace {

#ifndef NDEBUG
void debug_check_finite(const Tensor& t, const char* op) {
    for (float v : t.values()) {
        if (!std::isfinite(v)) throw DomainError(std::string("op ") + op + ": non-finite output");
    }
}
#define SLQ_CHECK_FINITE(t, op) debug_check_finite((t), (op))
#else
#define SLQ_CHECK_FINITE(t, op) ((void)0)
#endif

// Output tensor for an op: tracked iff recording is on and any input is tracked.
Tensor make_output(Shape shape, bool any_input_tracked) {
    Tensor out = Tensor::zeros(std::move(shape));
    if (autograd::enabled() && any_input_tracked) out.ensure_grad_buffer();
    return out;
}

} // namespace

// ---------------------------------------------------------------------------
// matmul / transpose
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.ndim() == 2 && b.ndim() == 2, "matmul: operands must be 2-D");
    require(a.dim(1) == b.dim(0), "matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                      " x " + shape_str(b.shape()));
    const int64_t k = a.dim(0), n = a.dim(1), m = b.dim(1);
    Tensor c = make_output({k, m}, a.tracked() || b.tracked());

    const float* pa = a.data();
    const float* pb = b.data();
    float* pc = c.data();
    for (int64_t i = 0; i < k; ++i) {
        float* crow = pc + i * m;
        for (int64_t p = 0; p < n; ++p) {
            const float av = pa[i * n + p];
            const float* brow = pb + p * m;
            for (int64_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
    SLQ_CHECK_FINITE(c, "matmul");

    if (c.tracked()) {
        Tensor ac = a, bc = b, cc = c;
        autograd::record([ac, bc, cc, k, n, m]() mutable {
            const float* dc = cc.grad();
            if (ac.tracked()) {
                // dA[i,p] += sum_j dC[i,j] * B[p,j]
                float* da = ac.grad();
                const float* pb = bc.data();
                for (int64_t i = 0; i < k; ++i) {
                    const float* dcrow = dc + i * m;
                    for (int64_t p = 0; p < n; ++p) {
                        const float* brow = pb + p * m;
                        float acc = 0.0f;
                        for (int64_t j = 0; j < m; ++j) acc += dcrow[j] * brow[j];
                        da[i * n + p] += acc;
                    }
                }
            }
            if (bc.tracked()) {
                // dB[p,j] += sum_i A[i,p] * dC[i,j]
                float* db = bc.grad();
                const float* pa = ac.data();
                for (int64_t i = 0; i < k; ++i) {
                    const float* dcrow = dc + i * m;
                    for (int64_t p = 0; p < n; ++p) {
                        const float av = pa[i * n + p];
                        float* dbrow = db + p * m;
                        for (int64_t j = 0; j < m; ++j) dbrow[j] += av * dcrow[j];
                    }
                }
            }
        });
    }
    return c;
}

Tensor transpose(const Tensor& a) {
    require(a.ndim() == 2, "transpose: operand must be 2-D");
    const int64_t r = a.dim(0), c = a.dim(1);
    Tensor t = make_output({c, r}, a.tracked());
    const float* pa = a.data();
    float* pt = t.data();
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) pt[j * r + i] = pa[i * c + j];

    if (t.tracked()) {
        Tensor ac = a, tc = t;
        autograd::record([ac, tc, r, c]() mutable {
            if (!ac.tracked()) return;
            float* da = ac.grad();
            const float* dt = tc.grad();
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j) da[i * c + j] += dt[j * r + i];
        });
    }
    return t;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "elementwise: shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
    const int64_t n = a.numel();
    if (op == EwOp::div) {
        for (float v : b.values())
            if (v == 0.0f) throw DomainError("elementwise: division by zero element");
    }
    Tensor out = make_output(a.shape(), a.tracked() || b.tracked());
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    switch (op) {
        case EwOp::add: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
        case EwOp::sub: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
        case EwOp::mul: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
        case EwOp::div: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i]; break;
    }
    SLQ_CHECK_FINITE(out, "elementwise");

    if (out.tracked()) {
        Tensor ac = a, bc = b, oc = out;
        autograd::record([op, ac, bc, oc, n]() mutable {
            const float* dout = oc.grad();
            const float* pa = ac.data();
            const float* pb = bc.data();
            float* da = ac.tracked() ? ac.grad() : nullptr;
            float* db = bc.tracked() ? bc.grad() : nullptr;
            for (int64_t i = 0; i < n; ++i) {
                const float g = dout[i];
                switch (op) {
                    case EwOp::add:
                        if (da) da[i] += g;
                        if (db) db[i] += g;
                        break;
                    case EwOp::sub:
                        if (da) da[i] += g;
                        if (db) db[i] -= g;
                        break;
                    case EwOp::mul:
                        if (da) da[i] += g * pb[i];
                        if (db) db[i] += g * pa[i];
                        break;
                    case EwOp::div:
                        if (da) da[i] += g / pb[i];
                        if (db) db[i] -= g * pa[i] / (pb[i] * pb[i]);
                        break;
                }
            }
        });
    }
    return out;
}

Tensor elementwise(EwOp op, const Tensor& a, float b) {
    if (op == EwOp::div && b == 0.0f) throw DomainError("elementwise: division by zero scalar");
    const int64_t n = a.numel();
    Tensor out = make_output(a.shape(), a.tracked());
    const float* pa = a.data();
    float* po = out.data();
    switch (op) {
        case EwOp::add: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + b; break;
        case EwOp::sub: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - b; break;
        case EwOp::mul: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * b; break;
        case EwOp::div: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] / b; break;
    }
    if (out.tracked()) {
        Tensor ac = a, oc = out;
        autograd::record([op, ac, oc, b, n]() mutable {
            if (!ac.tracked()) return;
            float* da = ac.grad();
            const float* dout = oc.grad();
            float k = 1.0f;
            if (op == EwOp::mul) k = b;
            if (op == EwOp::div) k = 1.0f / b;
            for (int64_t i = 0; i < n; ++i) da[i] += dout[i] * k;
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(EwOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(EwOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(EwOp::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(EwOp::div, a, b); }
Tensor mul_scalar(const Tensor& a, float s) { return elementwise(EwOp::mul, a, s); }

Tensor scale_axis(EwOp op, const Tensor& a, const Tensor& v, int axis) {
    require(op == EwOp::mul || op == EwOp::div, "scale_axis: op must be mul or div");
    require(a.ndim() == 2 && v.ndim() == 1, "scale_axis: need 2-D tensor and 1-D vector");
    require(axis == 0 || axis == 1, "scale_axis: axis must be 0 or 1");
    require(v.dim(0) == a.dim(axis), "scale_axis: vector length " + shape_str(v.shape()) +
                                         " does not match axis extent of " + shape_str(a.shape()));
    if (op == EwOp::div) {
        for (float x : v.values())
            if (x == 0.0f) throw DomainError("scale_axis: division by zero element");
    }
    const int64_t r = a.dim(0), c = a.dim(1);
    Tensor out = make_output(a.shape(), a.tracked() || v.tracked());
    const float* pa = a.data();
    const float* pv = v.data();
    float* po = out.data();
    for (int64_t i = 0; i < r; ++i) {
        for (int64_t j = 0; j < c; ++j) {
            const float f = pv[axis == 0 ? i : j];
            const float x = pa[i * c + j];
            po[i * c + j] = (op == EwOp::mul) ? x * f : x / f;
        }
    }
    SLQ_CHECK_FINITE(out, "scale_axis");

    if (out.tracked()) {
        Tensor ac = a, vc = v, oc = out;
        autograd::record([op, ac, vc, oc, r, c, axis]() mutable {
            const float* dout = oc.grad();
            const float* pa = ac.data();
            const float* pv = vc.data();
            float* da = ac.tracked() ? ac.grad() : nullptr;
            float* dv = vc.tracked() ? vc.grad() : nullptr;
            for (int64_t i = 0; i < r; ++i) {
                for (int64_t j = 0; j < c; ++j) {
                    const int64_t vi = (axis == 0) ? i : j;
                    const float f = pv[vi];
                    const float g = dout[i * c + j];
                    const float x = pa[i * c + j];
                    if (op == EwOp::mul) {
                        if (da) da[i * c + j] += g * f;
                        if (dv) dv[vi] += g * x;
                    } else {
                        if (da) da[i * c + j] += g / f;
                        if (dv) dv[vi] -= g * x / (f * f);
                    }
                }
            }
        });
    }
    return out;
}

Tensor div_cols(const Tensor& x, const Tensor& v) { return scale_axis(EwOp::div, x, v, 1); }
Tensor mul_rows(const Tensor& w, const Tensor& v) { return scale_axis(EwOp::mul, w, v, 0); }

// ---------------------------------------------------------------------------
// activations / normalization
// ---------------------------------------------------------------------------

Tensor exp(const Tensor& a) {
    const int64_t n = a.numel();
    Tensor out = make_output(a.shape(), a.tracked());
    const float* pa = a.data();
    float* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = std::exp(pa[i]);
    SLQ_CHECK_FINITE(out, "exp");
    if (out.tracked()) {
        Tensor ac = a, oc = out;
        autograd::record([ac, oc, n]() mutable {
            if (!ac.tracked()) return;
            float* da = ac.grad();
            const float* dout = oc.grad();
            const float* po = oc.data();
            for (int64_t i = 0; i < n; ++i) da[i] += dout[i] * po[i];
        });
    }
    return out;
}

Tensor silu(const Tensor& a) {
    const int64_t n = a.numel();
    Tensor out = make_output(a.shape(), a.tracked());
    const float* pa = a.data();
    float* po = out.data();
    for (int64_t i = 0; i < n; ++i) {
        const float s = 1.0f / (1.0f + std::exp(-pa[i]));
        po[i] = pa[i] * s;
    }
    if (out.tracked()) {
        Tensor ac = a, oc = out;
        autograd::record([ac, oc, n]() mutable {
            if (!ac.tracked()) return;
            float* da = ac.grad();
            const float* dout = oc.grad();
            const float* pa = ac.data();
            for (int64_t i = 0; i < n; ++i) {
                const float s = 1.0f / (1.0f + std::exp(-pa[i]));
                da[i] += dout[i] * (s * (1.0f + pa[i] * (1.0f - s)));
            }
        });
    }
    return out;
}

namespace {

// Shared softmax kernel; mask_causal limits row i to columns [0, i].
Tensor softmax_impl(const Tensor& a, bool mask_causal) {
    require(a.ndim() == 2, "softmax: operand must be 2-D");
    const int64_t r = a.dim(0), c = a.dim(1);
    if (mask_causal) require(r == c, "causal softmax: matrix must be square");
    Tensor out = make_output(a.shape(), a.tracked());
    const float* pa = a.data();
    float* po = out.data();
    for (int64_t i = 0; i < r; ++i) {
        const int64_t lim = mask_causal ? i + 1 : c;
        const float* row = pa + i * c;
        float* orow = po + i * c;
        float mx = row[0];
        for (int64_t j = 1; j < lim; ++j) mx = std::max(mx, row[j]);
        float total = 0.0f;
        for (int64_t j = 0; j < lim; ++j) {
            orow[j] = std::exp(row[j] - mx);
            total += orow[j];
        }
        for (int64_t j = 0; j < lim; ++j) orow[j] /= total;
        for (int64_t j = lim; j < c; ++j) orow[j] = 0.0f;
    }
    if (out.tracked()) {
        Tensor ac = a, oc = out;
        autograd::record([ac, oc, r, c, mask_causal]() mutable {
            if (!ac.tracked()) return;
            float* da = ac.grad();
            const float* dout = oc.grad();
            const float* po = oc.data();
            for (int64_t i = 0; i < r; ++i) {
                const int64_t lim = mask_causal ? i + 1 : c;
                const float* yrow = po + i * c;
                const float* grow = dout + i * c;
                float dot = 0.0f;
                for (int64_t j = 0; j < lim; ++j) dot += grow[j] * yrow[j];
                float* darow = da + i * c;
                for (int64_t j = 0; j < lim; ++j) darow[j] += (grow[j] - dot) * yrow[j];
            }
        });
    }
    return out;
}

} // namespace

Tensor softmax_rows(const Tensor& a) { return softmax_impl(a, false); }
Tensor causal_softmax_rows(const Tensor& scores) { return softmax_impl(scores, true); }

Tensor rmsnorm_rows(const Tensor& x, const Tensor& gain, float eps) {
    require(x.ndim() == 2 && gain.ndim() == 1, "rmsnorm: need 2-D input and 1-D gain");
    require(gain.dim(0) == x.dim(1), "rmsnorm: gain length must match row width");
    const int64_t r = x.dim(0), c = x.dim(1);
    Tensor out = make_output(x.shape(), x.tracked() || gain.tracked());
    std::vector<float> inv_rms(static_cast<size_t>(r));
    const float* px = x.data();
    const float* pg = gain.data();
    float* po = out.data();
    for (int64_t i = 0; i < r; ++i) {
        const float* row = px + i * c;
        float ms = 0.0f;
        for (int64_t j = 0; j < c; ++j) ms += row[j] * row[j];
        ms = ms / static_cast<float>(c) + eps;
        const float inv = 1.0f / std::sqrt(ms);
        inv_rms[static_cast<size_t>(i)] = inv;
        float* orow = po + i * c;
        for (int64_t j = 0; j < c; ++j) orow[j] = row[j] * inv * pg[j];
    }
    if (out.tracked()) {
        Tensor xc = x, gc = gain, oc = out;
        autograd::record([xc, gc, oc, r, c, inv_rms]() mutable {
            const float* dout = oc.grad();
            const float* px = xc.data();
            const float* pg = gc.data();
            float* dx = xc.tracked() ? xc.grad() : nullptr;
            float* dg = gc.tracked() ? gc.grad() : nullptr;
            for (int64_t i = 0; i < r; ++i) {
                const float inv = inv_rms[static_cast<size_t>(i)];
                const float* row = px + i * c;
                const float* grow = dout + i * c;
                if (dg) {
                    for (int64_t j = 0; j < c; ++j) dg[j] += grow[j] * row[j] * inv;
                }
                if (dx) {
                    // y_j = x_j * inv * g_j, inv = (mean(x^2)+eps)^-1/2
                    float dot = 0.0f;
                    for (int64_t j = 0; j < c; ++j) dot += grow[j] * pg[j] * row[j];
                    const float k = dot * inv * inv * inv / static_cast<float>(c);
                    float* dxrow = dx + i * c;
                    for (int64_t j = 0; j < c; ++j)
                        dxrow[j] += grow[j] * pg[j] * inv - row[j] * k;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

namespace {

enum class Red { sum, mean, sum_sq };

Tensor reduce_impl(Red kind, const Tensor& a) {
    const int64_t n = a.numel();
    require(n > 0, "reduce: empty tensor");
    Tensor out = make_output({1}, a.tracked());
    const float* pa = a.data();
    float acc = 0.0f;
    switch (kind) {
        case Red::sum:
        case Red::mean: for (int64_t i = 0; i < n; ++i) acc += pa[i]; break;
        case Red::sum_sq: for (int64_t i = 0; i < n; ++i) acc += pa[i] * pa[i]; break;
    }
    if (kind == Red::mean) acc /= static_cast<float>(n);
    out.data()[0] = acc;
    if (out.tracked()) {
        Tensor ac = a, oc = out;
        autograd::record([kind, ac, oc, n]() mutable {
            if (!ac.tracked()) return;
            float* da = ac.grad();
            const float g = oc.grad()[0];
            const float* pa = ac.data();
            switch (kind) {
                case Red::sum: for (int64_t i = 0; i < n; ++i) da[i] += g; break;
                case Red::mean: {
                    const float k = g / static_cast<float>(n);
                    for (int64_t i = 0; i < n; ++i) da[i] += k;
                    break;
                }
                case Red::sum_sq:
                    for (int64_t i = 0; i < n; ++i) da[i] += 2.0f * g * pa[i];
                    break;
            }
        });
    }
    return out;
}

} // namespace

Tensor sum(const Tensor& a) { return reduce_impl(Red::sum, a); }
Tensor mean(const Tensor& a) { return reduce_impl(Red::mean, a); }
Tensor sum_sq(const Tensor& a) { return reduce_impl(Red::sum_sq, a); }

// ---------------------------------------------------------------------------
// slicing / concat
// ---------------------------------------------------------------------------

Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1) {
    require(a.ndim() == 2, "slice_cols: operand must be 2-D");
    require(0 <= c0 && c0 < c1 && c1 <= a.dim(1), "slice_cols: bad column range");
    const int64_t r = a.dim(0), c = a.dim(1), w = c1 - c0;
    Tensor out = make_output({r, w}, a.tracked());
    const float* pa = a.data();
    float* po = out.data();
    for (int64_t i = 0; i < r; ++i)
        std::memcpy(po + i * w, pa + i * c + c0, static_cast<size_t>(w) * sizeof(float));
    if (out.tracked()) {
        Tensor ac = a, oc = out;
        autograd::record([ac, oc, r, c, w, c0]() mutable {
            if (!ac.tracked()) return;
            float* da = ac.grad();
            const float* dout = oc.grad();
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < w; ++j) da[i * c + c0 + j] += dout[i * w + j];
        });
    }
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_cols: no parts");
    const int64_t r = parts[0].dim(0);
    int64_t total = 0;
    bool tracked = false;
    for (const Tensor& p : parts) {
        require(p.ndim() == 2 && p.dim(0) == r, "concat_cols: row counts differ");
        total += p.dim(1);
        tracked = tracked || p.tracked();
    }
    Tensor out = make_output({r, total}, tracked);
    float* po = out.data();
    int64_t off = 0;
    for (const Tensor& p : parts) {
        const int64_t w = p.dim(1);
        const float* pp = p.data();
        for (int64_t i = 0; i < r; ++i)
            std::memcpy(po + i * total + off, pp + i * w, static_cast<size_t>(w) * sizeof(float));
        off += w;
    }
    if (out.tracked()) {
        std::vector<Tensor> pc = parts;
        Tensor oc = out;
        autograd::record([pc, oc, r, total]() mutable {
            const float* dout = oc.grad();
            int64_t off = 0;
            for (Tensor& p : pc) {
                const int64_t w = p.dim(1);
                if (p.tracked()) {
                    float* dp = p.grad();
                    for (int64_t i = 0; i < r; ++i)
                        for (int64_t j = 0; j < w; ++j) dp[i * w + j] += dout[i * total + off + j];
                }
                off += w;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// rotary embedding
// ---------------------------------------------------------------------------

Tensor rope_rows(const Tensor& x, int n_heads, float theta_base) {
    require(x.ndim() == 2, "rope: operand must be 2-D");
    const int64_t k = x.dim(0), d = x.dim(1);
    require(d % n_heads == 0, "rope: width not divisible by head count");
    const int64_t hd = d / n_heads;
    require(hd % 2 == 0, "rope: head width must be even");
    Tensor out = make_output(x.shape(), x.tracked());
    const float* px = x.data();
    float* po = out.data();

    std::vector<float> cos_t(static_cast<size_t>(k * hd / 2));
    std::vector<float> sin_t(static_cast<size_t>(k * hd / 2));
    for (int64_t t = 0; t < k; ++t) {
        for (int64_t p = 0; p < hd / 2; ++p) {
            const float freq =
                std::pow(theta_base, -2.0f * static_cast<float>(p) / static_cast<float>(hd));
            const float ang = static_cast<float>(t) * freq;
            cos_t[static_cast<size_t>(t * (hd / 2) + p)] = std::cos(ang);
            sin_t[static_cast<size_t>(t * (hd / 2) + p)] = std::sin(ang);
        }
    }
    for (int64_t t = 0; t < k; ++t) {
        for (int h = 0; h < n_heads; ++h) {
            const int64_t base = t * d + h * hd;
            for (int64_t p = 0; p < hd / 2; ++p) {
                const float c = cos_t[static_cast<size_t>(t * (hd / 2) + p)];
                const float s = sin_t[static_cast<size_t>(t * (hd / 2) + p)];
                const float a = px[base + 2 * p];
                const float b = px[base + 2 * p + 1];
                po[base + 2 * p] = a * c - b * s;
                po[base + 2 * p + 1] = a * s + b * c;
            }
        }
    }
    if (out.tracked()) {
        Tensor xc = x, oc = out;
        autograd::record([xc, oc, k, d, hd, n_heads, cos_t, sin_t]() mutable {
            if (!xc.tracked()) return;
            float* dx = xc.grad();
            const float* dout = oc.grad();
            // inverse rotation on the gradient pairs
            for (int64_t t = 0; t < k; ++t) {
                for (int h = 0; h < n_heads; ++h) {
                    const int64_t base = t * d + h * hd;
                    for (int64_t p = 0; p < hd / 2; ++p) {
                        const float c = cos_t[static_cast<size_t>(t * (hd / 2) + p)];
                        const float s = sin_t[static_cast<size_t>(t * (hd / 2) + p)];
                        const float ga = dout[base + 2 * p];
                        const float gb = dout[base + 2 * p + 1];
                        dx[base + 2 * p] += ga * c + gb * s;
                        dx[base + 2 * p + 1] += -ga * s + gb * c;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// embedding / cross entropy
// ---------------------------------------------------------------------------

Tensor embedding_rows(const Tensor& table, std::span<const int> ids) {
    require(table.ndim() == 2, "embedding: table must be 2-D");
    const int64_t v = table.dim(0), d = table.dim(1);
    const int64_t k = static_cast<int64_t>(ids.size());
    for (int id : ids) require(0 <= id && id < v, "embedding: token id out of range");
    Tensor out = make_output({k, d}, table.tracked());
    const float* pt = table.data();
    float* po = out.data();
    for (int64_t i = 0; i < k; ++i)
        std::memcpy(po + i * d, pt + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * d,
                    static_cast<size_t>(d) * sizeof(float));
    if (out.tracked()) {
        Tensor tc = table, oc = out;
        std::vector<int> idv(ids.begin(), ids.end());
        autograd::record([tc, oc, idv, d]() mutable {
            if (!tc.tracked()) return;
            float* dt = tc.grad();
            const float* dout = oc.grad();
            for (size_t i = 0; i < idv.size(); ++i) {
                float* drow = dt + static_cast<int64_t>(idv[i]) * d;
                const float* grow = dout + static_cast<int64_t>(i) * d;
                for (int64_t j = 0; j < d; ++j) drow[j] += grow[j];
            }
        });
    }
    return out;
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> targets) {
    require(logits.ndim() == 2, "cross_entropy: logits must be 2-D");
    const int64_t k = logits.dim(0), v = logits.dim(1);
    require(static_cast<int64_t>(targets.size()) == k, "cross_entropy: target count mismatch");
    for (int t : targets) require(0 <= t && t < v, "cross_entropy: target id out of range");

    Tensor out = make_output({1}, logits.tracked());
    const float* pl = logits.data();
    std::vector<float> probs;
    const bool keep_probs = out.tracked();
    if (keep_probs) probs.resize(static_cast<size_t>(k * v));
    double total = 0.0;
    for (int64_t i = 0; i < k; ++i) {
        const float* row = pl + i * v;
        float mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        float z = 0.0f;
        for (int64_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        const float logz = std::log(z) + mx;
        total += static_cast<double>(logz - row[targets[static_cast<size_t>(i)]]);
        if (keep_probs) {
            for (int64_t j = 0; j < v; ++j)
                probs[static_cast<size_t>(i * v + j)] = std::exp(row[j] - logz);
        }
    }
    out.data()[0] = static_cast<float>(total / static_cast<double>(k));
    if (out.tracked()) {
        Tensor lc = logits, oc = out;
        std::vector<int> tv(targets.begin(), targets.end());
        autograd::record([lc, oc, tv, k, v, probs]() mutable {
            if (!lc.tracked()) return;
            float* dl = lc.grad();
            const float g = oc.grad()[0] / static_cast<float>(k);
            for (int64_t i = 0; i < k; ++i) {
                const float* prow = probs.data() + i * v;
                float* drow = dl + i * v;
                for (int64_t j = 0; j < v; ++j) drow[j] += g * prow[j];
                drow[tv[static_cast<size_t>(i)]] -= g;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

void AdamWState::init(const std::vector<Tensor*>& params, AdamWConfig config) {
    cfg = config;
    step_count = 0;
    m.clear();
    v.clear();
    for (const Tensor* p : params) {
        m.emplace_back(static_cast<size_t>(p->numel()), 0.0f);
        v.emplace_back(static_cast<size_t>(p->numel()), 0.0f);
    }
}

void adamw_step(const std::vector<Tensor*>& params, AdamWState& state, float lr) {
    require(lr >= 0.0f, "adamw: negative learning rate");
    require(state.m.size() == params.size(), "adamw: state does not match parameter list");
    state.step_count += 1;
    const float b1 = state.cfg.beta1;
    const float b2 = state.cfg.beta2;
    const float bc1 = 1.0f - std::pow(b1, static_cast<float>(state.step_count));
    const float bc2 = 1.0f - std::pow(b2, static_cast<float>(state.step_count));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = *params[pi];
        require(p.tracked(), "adamw: parameter has no gradient buffer");
        require(static_cast<size_t>(p.numel()) == state.m[pi].size(),
                "adamw: moment buffer shape mismatch");
        float* w = p.data();
        const float* g = p.grad();
        float* mb = state.m[pi].data();
        float* vb = state.v[pi].data();
        const int64_t n = p.numel();
        for (int64_t i = 0; i < n; ++i) {
            if (std::isnan(g[i]))
                throw DomainError("adamw: NaN gradient in parameter " + std::to_string(pi) +
                                  " element " + std::to_string(i));
            mb[i] = b1 * mb[i] + (1.0f - b1) * g[i];
            vb[i] = b2 * vb[i] + (1.0f - b2) * g[i] * g[i];
            const float mhat = mb[i] / bc1;
            const float vhat = vb[i] / bc2;
            w[i] -= lr * (mhat / (std::sqrt(vhat) + state.cfg.eps) +
                          state.cfg.weight_decay * w[i]);
        }
    }
}

float linear_decay_lr(float base, int64_t step, int64_t total_steps) {
    if (total_steps <= 0) return base;
    if (step >= total_steps) return 0.0f;
    return base * static_cast<float>(total_steps - step) / static_cast<float>(total_steps);
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

uint64_t Rng::uniform_below(uint64_t n) {
    if (n == 0) throw ContractError("rng: uniform_below(0)");
    // rejection sampling keeps the draw unbiased and platform-stable
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
        x = gen_();
    } while (x >= limit);
    return x % n;
}

float Rng::uniform(float lo, float hi) {
    const double u = static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    return lo + static_cast<float>(u * (static_cast<double>(hi) - static_cast<double>(lo)));
}

float Rng::normal(float mean, float stddev) {
    if (has_spare_) {
        has_spare_ = false;
        return mean + stddev * spare_;
    }
    // Box-Muller
    double u1, u2;
    do {
        u1 = static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    } while (u1 <= 1e-300);
    u2 = static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = static_cast<float>(r * std::sin(a));
    has_spare_ = true;
    return mean + stddev * static_cast<float>(r * std::cos(a));
}

Tensor Rng::randn(Shape shape, float stddev, bool requires_grad) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    float* p = t.data();
    const int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) p[i] = normal(0.0f, stddev);
    return t;
}

} // namespace slq
