#pragma once

// Dense float32 tensors with reverse-mode autodiff on a per-thread tape,
// plus the AdamW optimizer. Everything downstream computes on this.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "slq/error.hpp"

namespace slq {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value);
    static Tensor scalar(float value);
    // Validates that every value is finite.
    static Tensor from_data(Shape shape, std::vector<float> values, bool requires_grad = false);

    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
    bool defined() const { return data_ != nullptr; }

    float* data() { return data_->data(); }
    const float* data() const { return data_->data(); }
    std::span<const float> values() const { return {data_->data(), data_->size()}; }

    bool tracked() const { return grad_ != nullptr; }
    bool requires_grad() const { return requires_grad_; }
    // Marks a leaf parameter; allocates the gradient buffer.
    void set_requires_grad(bool on);
    float* grad() { return grad_ ? grad_->data() : nullptr; }
    const float* grad() const { return grad_ ? grad_->data() : nullptr; }
    std::span<const float> grad_values() const { return {grad_->data(), grad_->size()}; }
    void zero_grad();

    float item() const;              // scalar tensors only
    float at(int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
    float at(int64_t i, int64_t j) const;
    float& mut(int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
    float& mut(int64_t i, int64_t j);

    Tensor detached() const;         // same storage, no grad tracking
    Tensor clone() const;            // deep copy, untracked

    // Internal: used by ops to mark graph intermediates.
    void ensure_grad_buffer();

private:
    Shape shape_;
    std::shared_ptr<std::vector<float>> data_;
    std::shared_ptr<std::vector<float>> grad_;
    bool requires_grad_ = false;
};

// ---------------------------------------------------------------------------
// autograd tape
// ---------------------------------------------------------------------------
namespace autograd {

bool enabled();

// RAII scope that disables recording (eval / cache-advance paths).
struct NoGrad {
    NoGrad();
    ~NoGrad();
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

private:
    bool prev_;
};

void record(std::function<void()> backward_fn);
size_t tape_size();
void clear();

// Seeds d(loss)=1, replays the tape in reverse, then clears it.
// loss must be scalar; an untracked loss just clears the tape.
void backward(Tensor& loss);

} // namespace autograd

// ---------------------------------------------------------------------------
// ops (all record gradients when the tape is active and an input is tracked)
// ---------------------------------------------------------------------------

enum class EwOp { add, sub, mul, div };

Tensor matmul(const Tensor& a, const Tensor& b);          // [k,n]x[n,m] -> [k,m]
Tensor transpose(const Tensor& a);                        // 2-D

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b);   // same shape
Tensor elementwise(EwOp op, const Tensor& a, float b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, float s);

// Broadcast a length-(shape[axis]) vector over the given axis of a 2-D tensor.
Tensor scale_axis(EwOp op, const Tensor& a, const Tensor& v, int axis);
Tensor div_cols(const Tensor& x, const Tensor& v);        // x[i,j] / v[j]
Tensor mul_rows(const Tensor& w, const Tensor& v);        // w[i,j] * v[i]

Tensor exp(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor causal_softmax_rows(const Tensor& scores);         // masks j > i before softmax
Tensor rmsnorm_rows(const Tensor& x, const Tensor& gain, float eps = 1e-5f);

Tensor sum(const Tensor& a);                              // -> scalar
Tensor mean(const Tensor& a);                             // -> scalar
Tensor sum_sq(const Tensor& a);                           // -> scalar, sum of squares

Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1);
Tensor concat_cols(const std::vector<Tensor>& parts);

// Rotary position embedding over per-head even/odd pairs; rows are positions.
Tensor rope_rows(const Tensor& x, int n_heads, float theta_base = 10000.0f);

Tensor embedding_rows(const Tensor& table, std::span<const int> ids);
// Mean negative log-likelihood of targets under row-wise softmax(logits).
Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> targets);

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct AdamWConfig {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;
};

struct AdamWState {
    AdamWConfig cfg;
    int64_t step_count = 0;
    std::vector<std::vector<float>> m;   // first moments, one buffer per parameter
    std::vector<std::vector<float>> v;   // second moments

    void init(const std::vector<Tensor*>& params, AdamWConfig config = {});
    bool initialized() const { return !m.empty(); }
};

// In-place AdamW update from each param's grad buffer. NaN gradients abort.
void adamw_step(const std::vector<Tensor*>& params, AdamWState& state, float lr);

// base * (total - step) / total, reaching base/total at the final step.
float linear_decay_lr(float base, int64_t step, int64_t total_steps);

// ---------------------------------------------------------------------------
// deterministic RNG (portable across platforms, unlike std distributions)
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }
    // Uniform in [0, n), n > 0.
    uint64_t uniform_below(uint64_t n);
    float uniform(float lo, float hi);
    float normal(float mean, float stddev);

    Tensor randn(Shape shape, float stddev, bool requires_grad = false);

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    float spare_ = 0.0f;
};

} // namespace slq
