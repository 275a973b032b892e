#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "slq/quantizer.hpp"
#include "test_util.hpp"

using namespace slq;

namespace {

QuantSpec per_tensor(int bits) {
    QuantSpec s;
    s.bits = bits;
    s.granularity = Granularity::per_tensor;
    return s;
}

Tensor random_tensor(Rng& rng, int64_t rows, int64_t cols, float scale) {
    return rng.randn({rows, cols}, scale);
}

} // namespace

TEST_CASE("hand vector: z=[-1,0,2] at two bits") {
    Tensor z = Tensor::from_data({1, 3}, {-1, 0, 2});
    const QuantSpec spec = per_tensor(2);
    const QuantParams p = calc_params(z, spec);
    CHECK(p.step[0] == 1.0f);
    CHECK(p.beta[0] == -1);

    const QuantizedTensor q = quantize(z, p, spec);
    CHECK(q.codes[0] == 0);
    CHECK(q.codes[1] == 1);
    CHECK(q.codes[2] == 3);

    const Tensor back = dequantize(q);
    CHECK(back.at(0) == -1.0f);
    CHECK(back.at(1) == 0.0f);
    CHECK(back.at(2) == 2.0f);
}

TEST_CASE("degenerate range: constant tensor uses the epsilon step") {
    Tensor z = Tensor::zeros({2, 2});
    for (int bits : {2, 4, 8, 16}) {
        const QuantParams p = calc_params(z, per_tensor(bits));
        CHECK(p.step[0] == 1e-8f);
        CHECK(p.beta[0] == 0);
        const QuantizedTensor q = quantize(z, p, per_tensor(bits));
        for (uint32_t c : q.codes) CHECK(c == 0);
    }
}

TEST_CASE("ramp 0..15 at four bits has unit step") {
    std::vector<float> v(16);
    for (int i = 0; i < 16; ++i) v[static_cast<size_t>(i)] = static_cast<float>(i);
    Tensor z = Tensor::from_data({1, 16}, v);
    const QuantParams p = calc_params(z, per_tensor(4));
    CHECK(p.step[0] == 1.0f);
    CHECK(p.beta[0] == 0);
    const QuantizedTensor q = quantize(z, p, per_tensor(4));
    for (int i = 0; i < 16; ++i) CHECK(q.codes[static_cast<size_t>(i)] == static_cast<uint32_t>(i));
}

TEST_CASE("all-min maps to code 0, exact-grid max maps to the top code") {
    Tensor zmin = Tensor::full({1, 5}, -3.25f);
    const QuantParams pmin = calc_params(zmin, per_tensor(4));
    for (uint32_t c : quantize(zmin, pmin, per_tensor(4)).codes) CHECK(c == 0);

    // 0..2^b-1 grid: max lands exactly on the top code
    std::vector<float> v = {0, 1, 2, 3};
    Tensor z = Tensor::from_data({1, 4}, v);
    const QuantSpec spec = per_tensor(2);
    const QuantizedTensor q = quantize(z, calc_params(z, spec), spec);
    CHECK(q.codes[3] == 3);
}

TEST_CASE("round trip bound: |dequant - z| <= step/2 for unclipped values") {
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor z = random_tensor(rng, 6, 7, 2.0f);
        const QuantSpec spec = per_tensor(4);
        const QuantParams p = calc_params(z, spec);
        const Tensor back = dequantize(quantize(z, p, spec));
        for (int64_t i = 0; i < z.numel(); ++i)
            CHECK(std::fabs(back.at(i) - z.at(i)) <= p.step[0] * 0.5f * 1.0001f);
    }
}

TEST_CASE("fake quant at sixteen bits is near-identity") {
    Rng rng(37);
    Tensor z = random_tensor(rng, 8, 8, 1.0f);
    Tensor out = fake_quant(z, per_tensor(16));
    float scale = 0.0f;
    for (int64_t i = 0; i < z.numel(); ++i) scale = std::max(scale, std::fabs(z.at(i)));
    CHECK(test::max_abs_diff(out, z) < 1e-3f * scale);
}

TEST_CASE("straight-through gradient: one where in range, zero where clipped") {
    // frozen params clip everything above 3
    Tensor z = Tensor::from_data({1, 4}, {0, 1, 2, 9}, true);
    QuantParams p;
    p.shape = {1, 4};
    p.granularity = Granularity::per_tensor;
    p.step = {1.0f};
    p.beta = {0};
    Tensor out = fake_quant_with_params(z, p, per_tensor(2));
    Tensor loss = sum(out);
    autograd::backward(loss);
    CHECK(z.grad()[0] == 1.0f);
    CHECK(z.grad()[1] == 1.0f);
    CHECK(z.grad()[2] == 1.0f);
    CHECK(z.grad()[3] == 0.0f);   // code 9 clips to 3

    // dynamic params never clip, so the gradient is all ones
    Tensor z2 = Tensor::from_data({1, 4}, {-2, 0, 1, 5}, true);
    Tensor out2 = fake_quant(z2, per_tensor(4));
    Tensor loss2 = sum(out2);
    autograd::backward(loss2);
    for (int i = 0; i < 4; ++i) CHECK(z2.grad()[i] == 1.0f);
}

TEST_CASE("per-token rows each get their own params: per-row oracle") {
    Rng rng(41);
    Tensor z = random_tensor(rng, 5, 6, 1.5f);
    const QuantSpec spec = QuantSpec::acts_per_token(4);
    Tensor out = fake_quant(z, spec);
    for (int64_t r = 0; r < 5; ++r) {
        // scalar per-row oracle
        float mn = z.at(r, 0), mx = z.at(r, 0);
        for (int64_t j = 1; j < 6; ++j) {
            mn = std::min(mn, z.at(r, j));
            mx = std::max(mx, z.at(r, j));
        }
        float step = (mx - mn) / 15.0f;
        if (step < 1e-8f) step = 1e-8f;
        const int64_t beta = std::llround(mn / step);
        for (int64_t j = 0; j < 6; ++j) {
            const int64_t code =
                std::clamp<int64_t>(std::llround(z.at(r, j) / step) - beta, 0, 15);
            const float expect = static_cast<float>(code + beta) * step;
            CHECK(out.at(r, j) == expect);
        }
    }
}

TEST_CASE("partial column fake quant leaves the tail untouched") {
    Rng rng(43);
    Tensor z = random_tensor(rng, 4, 6, 1.0f);
    z.set_requires_grad(true);
    const QuantSpec spec = QuantSpec::weights_per_channel(4);
    Tensor out = fake_quant_partial_cols(z, spec, 3);
    Tensor full = fake_quant(z.detached(), spec);
    for (int64_t i = 0; i < 4; ++i) {
        for (int64_t j = 0; j < 6; ++j) {
            if (j < 3) {
                CHECK(out.at(i, j) == full.at(i, j));   // same per-column params
            } else {
                CHECK(out.at(i, j) == z.at(i, j));
            }
        }
    }
    // zero columns quantized: identity pass-through
    Tensor same = fake_quant_partial_cols(z, spec, 0);
    CHECK(test::max_abs_diff(same, z) == 0.0f);
}

TEST_CASE("spec validation names the failing constraint") {
    CHECK_THROWS_AS(calc_params(Tensor::zeros({2, 4}), [] {
                        QuantSpec s;
                        s.bits = 1;
                        return s;
                    }()),
                    ConfigError);
    CHECK_THROWS_AS(calc_params(Tensor::zeros({6, 4}), QuantSpec::weights_group_wise(4, 5)),
                    ConfigError);   // 5 does not divide 6
    CHECK_THROWS_AS(calc_params(Tensor::zeros({4}), QuantSpec::weights_per_channel(4)),
                    ConfigError);   // per-channel needs 2-D
}

// ---------------------------------------------------------------------------
// property suites (1000 randomized tensors per property)
// ---------------------------------------------------------------------------

namespace {

QuantSpec random_spec(Rng& rng, int64_t rows, int64_t cols) {
    const int bits_pool[5] = {2, 3, 4, 8, 16};
    QuantSpec s;
    s.bits = bits_pool[rng.uniform_below(5)];
    switch (rng.uniform_below(4)) {
        case 0: s.granularity = Granularity::per_tensor; break;
        case 1:
            s.granularity = Granularity::per_channel;
            s.axis = 1;
            break;
        case 2:
            s.granularity = Granularity::per_token;
            s.axis = 0;
            break;
        default: {
            s.granularity = Granularity::group_wise;
            s.axis = 1;
            // pick a divisor of rows
            std::vector<int64_t> divs;
            for (int64_t d = 1; d <= rows; ++d)
                if (rows % d == 0) divs.push_back(d);
            s.group_size = divs[rng.uniform_below(divs.size())];
            break;
        }
    }
    (void)cols;
    return s;
}

} // namespace

TEST_CASE("property: codes stay in range for arbitrary finite input") {
    Rng rng(53);
    for (int trial = 0; trial < 1000; ++trial) {
        const int64_t rows = 1 + static_cast<int64_t>(rng.uniform_below(8));
        const int64_t cols = 1 + static_cast<int64_t>(rng.uniform_below(8));
        Tensor z = random_tensor(rng, rows, cols, rng.uniform(0.01f, 100.0f));
        const QuantSpec spec = random_spec(rng, rows, cols);
        const QuantizedTensor q = quantize(z, calc_params(z, spec), spec);
        for (uint32_t c : q.codes) CHECK(c <= static_cast<uint32_t>(spec.max_code()));
    }
}

TEST_CASE("property: grid points are fixed points of fake quant") {
    // A tensor on its own quantizer's grid: exact power-of-two step, codes
    // spanning [0, 2^b-1] per slice so the recomputed min-max params land on
    // the same grid. Then quantize-dequantize must reproduce it bit-exactly.
    Rng rng(59);
    for (int trial = 0; trial < 1000; ++trial) {
        const int64_t n = 2 + static_cast<int64_t>(rng.uniform_below(30));
        const int bits = 2 + static_cast<int>(rng.uniform_below(7));
        const QuantSpec spec = per_tensor(bits);
        const float step = std::ldexp(1.0f, static_cast<int>(rng.uniform_below(12)) - 9);
        const int64_t beta = static_cast<int64_t>(rng.uniform_below(9)) - 4;
        const int64_t maxc = spec.max_code();
        Tensor z = Tensor::zeros({1, n});
        for (int64_t i = 0; i < n; ++i) {
            int64_t code = static_cast<int64_t>(rng.uniform_below(static_cast<uint64_t>(maxc) + 1));
            if (i == 0) code = 0;            // pin the slice range to the full grid
            if (i == 1) code = maxc;
            z.mut(i) = static_cast<float>(code + beta) * step;
        }
        Tensor out = fake_quant(z, spec);
        for (int64_t i = 0; i < n; ++i) CHECK(out.at(i) == z.at(i));
    }
}

TEST_CASE("property: error bound step/2 on unclipped elements") {
    Rng rng(61);
    for (int trial = 0; trial < 1000; ++trial) {
        const int64_t rows = 1 + static_cast<int64_t>(rng.uniform_below(6));
        const int64_t cols = 1 + static_cast<int64_t>(rng.uniform_below(6));
        Tensor z = random_tensor(rng, rows, cols, rng.uniform(0.05f, 10.0f));
        const QuantSpec spec = random_spec(rng, rows, cols);
        const QuantParams p = calc_params(z, spec);
        Tensor out = fake_quant(z, spec);
        for (int64_t i = 0; i < rows; ++i) {
            for (int64_t j = 0; j < cols; ++j) {
                const float step = p.step[static_cast<size_t>(p.slice_of(i, j))];
                // degenerate slices get the epsilon step and a huge offset;
                // the extra term is that offset's float32 representation error
                const float slack = std::fabs(z.at(i, j)) * 4e-7f;
                CHECK(std::fabs(out.at(i, j) - z.at(i, j)) <= step * 0.5f * 1.0002f + slack);
            }
        }
    }
}

TEST_CASE("property: quantize is monotone within a slice") {
    Rng rng(67);
    for (int trial = 0; trial < 1000; ++trial) {
        const int64_t n = 2 + static_cast<int64_t>(rng.uniform_below(15));
        Tensor z = random_tensor(rng, 1, n, rng.uniform(0.1f, 5.0f));
        // sort the row ascending
        std::vector<float> v(z.data(), z.data() + n);
        std::sort(v.begin(), v.end());
        Tensor sorted = Tensor::from_data({1, n}, v);
        const QuantSpec spec = per_tensor(2 + static_cast<int>(rng.uniform_below(7)));
        const QuantizedTensor q = quantize(sorted, calc_params(sorted, spec), spec);
        for (int64_t i = 1; i < n; ++i)
            CHECK(q.codes[static_cast<size_t>(i)] >= q.codes[static_cast<size_t>(i - 1)]);
    }
}

TEST_CASE("property: group size equal to the grouped extent is per-channel") {
    Rng rng(71);
    for (int trial = 0; trial < 1000; ++trial) {
        const int64_t rows = 1 + static_cast<int64_t>(rng.uniform_below(8));
        const int64_t cols = 1 + static_cast<int64_t>(rng.uniform_below(8));
        Tensor z = random_tensor(rng, rows, cols, 1.0f);
        const int bits = 2 + static_cast<int>(rng.uniform_below(7));
        Tensor a = fake_quant(z, QuantSpec::weights_group_wise(bits, rows));
        Tensor b = fake_quant(z, QuantSpec::weights_per_channel(bits));
        CHECK(test::max_abs_diff(a, b) == 0.0f);
    }
}
