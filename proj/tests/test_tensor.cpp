#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "slq/tensor.hpp"
#include "test_util.hpp"

using namespace slq;
using test::close;
using test::grad_vs_fd;

namespace {

// triple-loop reference, the independent matmul oracle
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
    const int64_t k = a.dim(0), n = a.dim(1), m = b.dim(1);
    Tensor c = Tensor::zeros({k, m});
    for (int64_t i = 0; i < k; ++i)
        for (int64_t j = 0; j < m; ++j) {
            float acc = 0.0f;
            for (int64_t p = 0; p < n; ++p) acc += a.at(i, p) * b.at(p, j);
            c.mut(i, j) = acc;
        }
    return c;
}

} // namespace

TEST_CASE("matmul identity and hand products") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::from_data({2, 2}, {3, 4, 5, 6});
    Tensor c = matmul(eye, b);
    CHECK(c.at(0, 0) == 3);
    CHECK(c.at(0, 1) == 4);
    CHECK(c.at(1, 0) == 5);
    CHECK(c.at(1, 1) == 6);

    Tensor r = matmul(Tensor::from_data({1, 2}, {1, 2}), Tensor::from_data({2, 1}, {3, 4}));
    CHECK(r.item() == 11);

    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ContractError);
}

TEST_CASE("matmul matches triple-loop oracle") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor a = rng.randn({5, 7}, 3.0f);
        Tensor b = rng.randn({7, 3}, 3.0f);
        CHECK(test::max_abs_diff(matmul(a, b), matmul_oracle(a, b)) < 1e-6f);
    }
}

TEST_CASE("elementwise basics and broadcast") {
    Tensor a = Tensor::from_data({2}, {2, 4});
    Tensor b = Tensor::from_data({2}, {2, 2});
    Tensor q = div(a, b);
    CHECK(q.at(0) == 1);
    CHECK(q.at(1) == 2);

    // column broadcast: each column j divided by v[j]
    Tensor x = Tensor::from_data({3, 2}, {2, 4, 6, 8, 10, 12});
    Tensor v = Tensor::from_data({2}, {1, 2});
    Tensor y = div_cols(x, v);
    for (int64_t i = 0; i < 3; ++i) {
        CHECK(y.at(i, 0) == x.at(i, 0));
        CHECK(y.at(i, 1) == x.at(i, 1) / 2);
    }

    // row broadcast: row i scaled by v[i]
    Tensor w = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor rv = Tensor::from_data({2}, {10, 100});
    Tensor s = mul_rows(w, rv);
    CHECK(s.at(0, 1) == 20);
    CHECK(s.at(1, 0) == 300);

    CHECK_THROWS_AS(div(a, Tensor::from_data({2}, {1, 0})), DomainError);
    CHECK_THROWS_AS(div_cols(x, Tensor::from_data({2}, {0, 1})), DomainError);
}

TEST_CASE("elementwise mul matches scalar loop") {
    Rng rng(11);
    Tensor a = rng.randn({4, 4}, 0.5f);
    Tensor b = rng.randn({4, 4}, 0.5f);
    Tensor c = mul(a, b);
    for (int64_t i = 0; i < 16; ++i) {
        volatile float expect = a.at(i) * b.at(i);   // volatile blocks fma contraction
        CHECK(std::fabs(c.at(i) - expect) < 1e-7f);
    }
}

TEST_CASE("construction rejects non-finite values") {
    CHECK_THROWS_AS(Tensor::from_data({2}, {1.0f, std::nanf("")}), DomainError);
    CHECK_THROWS_AS(Tensor::from_data({1}, {INFINITY}), DomainError);
}

TEST_CASE("backward: analytic derivative of sum of squares") {
    Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
    Tensor loss = sum_sq(x);
    autograd::backward(loss);
    CHECK(x.grad()[0] == 2);
    CHECK(x.grad()[1] == 4);
    CHECK(x.grad()[2] == 6);
}

TEST_CASE("backward: constant loss leaves gradients at zero") {
    Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
    Tensor loss = Tensor::scalar(5.0f);
    autograd::backward(loss);
    for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 0);
}

TEST_CASE("backward: non-scalar loss is a contract error") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor y = mul_scalar(x, 2.0f);
    CHECK_THROWS_AS(autograd::backward(y), ContractError);
}

TEST_CASE("backward: matmul+add chain matches finite differences") {
    Rng rng(13);
    Tensor a = rng.randn({3, 4}, 0.5f, true);
    Tensor b = rng.randn({4, 2}, 0.5f, true);
    Tensor c = rng.randn({3, 2}, 0.5f, true);
    auto loss_fn = [&] { return sum_sq(add(matmul(a, b), c)); };
    CHECK(grad_vs_fd({&a, &b, &c}, loss_fn) < 1e-3f);
}

TEST_CASE("gradient suite: every differentiable op vs finite differences") {
    Rng rng(17);
    int instances = 0;
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = rng.randn({3, 4}, 0.8f, true);
        Tensor v = rng.randn({4}, 0.3f, true);
        Tensor g = rng.randn({4}, 0.2f, true);
        // keep divisors away from zero
        for (int64_t i = 0; i < v.numel(); ++i) v.mut(i) = 1.0f + 0.3f * v.at(i) * v.at(i);

        CHECK(grad_vs_fd({&x}, [&] { return sum_sq(silu(x)); }) < 1e-3f);
        CHECK(grad_vs_fd({&x}, [&] { return sum_sq(softmax_rows(x)); }) < 2e-3f);
        CHECK(grad_vs_fd({&x, &g}, [&] {
                  return sum_sq(rmsnorm_rows(x, g));
              }) < 2e-3f);
        CHECK(grad_vs_fd({&x, &v}, [&] { return sum_sq(div_cols(x, v)); }) < 1e-3f);
        CHECK(grad_vs_fd({&v}, [&] { return sum_sq(exp(v)); }) < 1e-3f);
        CHECK(grad_vs_fd({&x}, [&] { return mean(mul(x, x)); }) < 1e-3f);
        CHECK(grad_vs_fd({&x}, [&] { return sum(slice_cols(x, 1, 3)); }) < 1e-3f);
        CHECK(grad_vs_fd({&x}, [&] { return sum_sq(rope_rows(x, 2)); }) < 1e-3f);
        CHECK(grad_vs_fd({&x}, [&] { return sum_sq(transpose(x)); }) < 1e-3f);
        instances += 9;
    }
    CHECK(instances >= 20);
}

TEST_CASE("causal softmax masks the future") {
    Rng rng(19);
    Tensor s = rng.randn({4, 4}, 1.0f);
    Tensor y = causal_softmax_rows(s);
    for (int64_t i = 0; i < 4; ++i) {
        float row = 0.0f;
        for (int64_t j = 0; j < 4; ++j) {
            if (j > i) CHECK(y.at(i, j) == 0.0f);
            row += y.at(i, j);
        }
        CHECK(close(row, 1.0f));
    }
}

TEST_CASE("softmax and silu fixed points") {
    Tensor y = softmax_rows(Tensor::from_data({1, 2}, {0, 0}));
    CHECK(close(y.at(0, 0), 0.5f));
    CHECK(close(y.at(0, 1), 0.5f));
    CHECK(silu(Tensor::from_data({1}, {0})).at(0) == 0.0f);
}

TEST_CASE("adamw: zero learning rate leaves parameters unchanged") {
    Tensor p = Tensor::from_data({3}, {1, 2, 3}, true);
    p.grad()[0] = 1.0f;
    p.grad()[1] = -2.0f;
    p.grad()[2] = 0.5f;
    AdamWState st;
    st.init({&p});
    adamw_step({&p}, st, 0.0f);
    CHECK(p.at(0) == 1);
    CHECK(p.at(1) == 2);
    CHECK(p.at(2) == 3);
    CHECK(st.step_count == 1);
}

TEST_CASE("adamw: one step matches the hand-unrolled recurrence") {
    const float g = 0.3f, w0 = 0.7f, lr = 0.01f;
    Tensor p = Tensor::from_data({1}, {w0}, true);
    p.grad()[0] = g;
    AdamWState st;
    st.init({&p});
    adamw_step({&p}, st, lr);

    // by hand: m=(1-b1)g, v=(1-b2)g^2, mhat=g, vhat=g^2, w -= lr*g/(|g|+eps)
    const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
    const float m = (1.0f - b1) * g;
    const float v = (1.0f - b2) * g * g;
    const float mhat = m / (1.0f - b1);
    const float vhat = v / (1.0f - b2);
    const float expect = w0 - lr * mhat / (std::sqrt(vhat) + eps);
    CHECK(std::fabs(p.at(0) - expect) < 1e-7f);
}

TEST_CASE("adamw: NaN gradient aborts with a diagnostic") {
    Tensor p = Tensor::from_data({1}, {1.0f}, true);
    p.grad()[0] = std::nanf("");
    AdamWState st;
    st.init({&p});
    CHECK_THROWS_AS(adamw_step({&p}, st, 0.1f), DomainError);
}

TEST_CASE("linear decay reaches base/T at the final step") {
    const float base = 0.5f;
    const int64_t T = 25;
    CHECK(close(linear_decay_lr(base, 0, T), base));
    CHECK(close(linear_decay_lr(base, T - 1, T), base / static_cast<float>(T)));
    CHECK(linear_decay_lr(base, T, T) == 0.0f);
}

TEST_CASE("cross entropy gradient is softmax minus one-hot") {
    Rng rng(23);
    Tensor logits = rng.randn({3, 5}, 1.0f, true);
    std::vector<int> targets = {1, 4, 0};
    auto loss_fn = [&] { return cross_entropy_rows(logits, targets); };
    CHECK(grad_vs_fd({&logits}, loss_fn) < 2e-3f);
}

TEST_CASE("embedding gathers rows and scatters gradients") {
    Tensor table = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    std::vector<int> ids = {2, 0, 2};
    Tensor out = embedding_rows(table, ids);
    CHECK(out.at(0, 0) == 5);
    CHECK(out.at(1, 1) == 2);
    Tensor loss = sum(out);
    autograd::backward(loss);
    CHECK(table.grad()[0] == 1.0f);   // row 0 used once
    CHECK(table.grad()[4] == 2.0f);   // row 2 used twice
    CHECK(table.grad()[2] == 0.0f);   // row 1 unused
}

TEST_CASE("deterministic: identical seeds produce bit-identical results") {
    auto run = [] {
        Rng rng(99);
        Tensor a = rng.randn({8, 8}, 1.0f, true);
        Tensor b = rng.randn({8, 8}, 1.0f);
        Tensor loss = sum_sq(silu(matmul(a, b)));
        autograd::backward(loss);
        std::vector<float> out(a.grad(), a.grad() + a.numel());
        out.push_back(loss.item());
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("tape is consumed after backward") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor loss = sum_sq(x);
    CHECK(autograd::tape_size() > 0);
    autograd::backward(loss);
    CHECK(autograd::tape_size() == 0);
}

TEST_CASE("no-grad scope suppresses recording") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    {
        autograd::NoGrad ng;
        Tensor y = mul_scalar(x, 3.0f);
        CHECK_FALSE(y.tracked());
    }
    CHECK(autograd::tape_size() == 0);
}
