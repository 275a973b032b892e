#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "slq/tensor.hpp"

namespace slq::test {

inline bool close(float a, float b, float rtol = 1e-5f, float atol = 1e-6f) {
    return std::fabs(a - b) <= atol + rtol * std::max(std::fabs(a), std::fabs(b));
}

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
    float worst = 0.0f;
    for (int64_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst, std::fabs(a.at(i) - b.at(i)));
    return worst;
}

inline float max_rel_diff(const Tensor& a, const Tensor& b, float floor = 1e-6f) {
    float worst = 0.0f;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const float denom = std::max({std::fabs(a.at(i)), std::fabs(b.at(i)), floor});
        worst = std::max(worst, std::fabs(a.at(i) - b.at(i)) / denom);
    }
    return worst;
}

// Central finite differences (h = 1e-3) against the recorded gradient of
// loss_fn, which must rebuild the graph from the current parameter values.
// Mismatch is measured relative to the gradient scale of each parameter;
// elementwise ratios on near-zero components would only measure fp32 noise.
inline float grad_vs_fd(const std::vector<Tensor*>& params,
                        const std::function<Tensor()>& loss_fn, float h = 1e-3f) {
    for (Tensor* p : params) p->zero_grad();
    Tensor loss = loss_fn();
    autograd::backward(loss);

    std::vector<std::vector<float>> grads;
    for (Tensor* p : params)
        grads.emplace_back(p->grad(), p->grad() + p->numel());

    float worst = 0.0f;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = *params[pi];
        float err = 0.0f, scale = 0.0f;
        for (int64_t i = 0; i < p.numel(); ++i) {
            const float orig = p.at(i);
            p.mut(i) = orig + h;
            const float up = loss_fn().item();
            autograd::clear();
            p.mut(i) = orig - h;
            const float dn = loss_fn().item();
            autograd::clear();
            p.mut(i) = orig;
            const float fd = (up - dn) / (2.0f * h);
            const float got = grads[pi][static_cast<size_t>(i)];
            err = std::max(err, std::fabs(fd - got));
            scale = std::max({scale, std::fabs(fd), std::fabs(got)});
        }
        worst = std::max(worst, err / std::max(scale, 0.01f));
    }
    return worst;
}

} // namespace slq::test
