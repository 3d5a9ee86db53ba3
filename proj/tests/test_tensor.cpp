#include <cmath>
#include <vector>

#include "ctxdet/tensor.hpp"
#include "doctest.h"

using namespace ctxdet;

namespace {

// Independent oracle: naive triple loop product.
std::vector<double> matmul_oracle(const Tensor& a, const Tensor& b) {
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::int64_t p = 0; p < k; ++p) {
                s += a.at({i, p}) * b.at({p, j});
            }
            out[static_cast<std::size_t>(i * n + j)] = s;
        }
    }
    return out;
}

}  // namespace

TEST_SUITE_BEGIN("tensor");

TEST_CASE("matmul identity") {
    Rng rng(7);
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor a = rand_uniform({2, 2}, rng, -2.0, 2.0);
    Tensor out = matmul(eye, a);
    for (std::int64_t i = 0; i < 4; ++i) {
        CHECK(out.values()[i] == a.values()[i]);
    }
}

TEST_CASE("matmul analytic") {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({2, 1}, {0, 1});
    Tensor out = matmul(a, b);
    CHECK(out.at({0, 0}) == 2.0);
    CHECK(out.at({1, 0}) == 4.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
    Rng rng(11);
    Tensor a = rand_uniform({3, 4}, rng, -2.0, 2.0);
    Tensor b = rand_uniform({4, 2}, rng, -2.0, 2.0);
    Tensor out = matmul(a, b);
    const auto expect = matmul_oracle(a, b);
    for (std::size_t i = 0; i < expect.size(); ++i) {
        CHECK(std::abs(out.values()[i] - expect[i]) < 1e-12);
    }
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    try {
        matmul(a, b);
        FAIL("expected exception");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
    }
}

TEST_CASE("matmul_nt agrees with explicit transpose") {
    Rng rng(12);
    Tensor a = rand_uniform({5, 3}, rng, -2.0, 2.0);
    Tensor b = rand_uniform({4, 3}, rng, -2.0, 2.0);
    Tensor lhs = matmul_nt(a, b);
    Tensor rhs = matmul(a, transpose2d(b));
    for (std::int64_t i = 0; i < lhs.numel(); ++i) {
        CHECK(std::abs(lhs.values()[i] - rhs.values()[i]) < 1e-12);
    }
}

TEST_CASE("scaled_softmax uniform logits") {
    for (const double tau : {0.5, 1.0, 8.0}) {
        Tensor x = Tensor::full({2, 5}, 1.3);
        Tensor y = scaled_softmax(x, tau);
        for (std::int64_t i = 0; i < y.numel(); ++i) {
            CHECK(y.values()[i] == doctest::Approx(0.2).epsilon(1e-12));
        }
    }
}

TEST_CASE("scaled_softmax single element") {
    Tensor y = scaled_softmax(Tensor::from_data({1}, {42.0}), 3.0);
    CHECK(y.values()[0] == 1.0);
}

TEST_CASE("scaled_softmax analytic two-logit case") {
    Tensor y = scaled_softmax(Tensor::from_data({2}, {0.0, std::log(2.0)}), 1.0);
    CHECK(y.values()[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(y.values()[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("scaled_softmax rows sum to one") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = rand_uniform({4, 7}, rng, -50.0, 50.0);
        Tensor y = scaled_softmax(x, rng.uniform(0.1, 30.0));
        for (std::int64_t r = 0; r < 4; ++r) {
            double s = 0.0;
            for (std::int64_t j = 0; j < 7; ++j) {
                const double v = y.at({r, j});
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
                s += v;
            }
            CHECK(std::abs(s - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("reshape_v flattens leading dims") {
    Tensor t = Tensor::from_data({1, 1, 1, 3}, {1, 2, 3});
    Tensor v = reshape_v(t);
    CHECK(v.shape() == Shape{1, 3});
}

TEST_CASE("reshape_v_inv inverts reshape_v") {
    Rng rng(17);
    Tensor t = rand_uniform({2, 3, 5, 4}, rng, -2.0, 2.0);
    Tensor back = reshape_v_inv(reshape_v(t), t.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        CHECK(back.values()[i] == t.values()[i]);
    }
}

TEST_CASE("reshape_v row-major index mapping") {
    // Oracle: element (n,i,j,c) of a [2,3,3,4] tensor lands at row n*9 + i*3 + j.
    const std::int64_t N = 2, S = 3, C = 4;
    std::vector<double> data(static_cast<std::size_t>(N * S * S * C));
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<double>(i);
    Tensor t = Tensor::from_data({N, S, S, C}, data);
    Tensor v = reshape_v(t);
    CHECK(v.shape() == Shape{18, 4});
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t i = 0; i < S; ++i) {
            for (std::int64_t j = 0; j < S; ++j) {
                for (std::int64_t c = 0; c < C; ++c) {
                    const std::int64_t row = n * 9 + i * 3 + j;
                    CHECK(v.at({row, c}) == t.at({n, i, j, c}));
                }
            }
        }
    }
}

TEST_CASE("naive subsample is identity for s=1") {
    Rng rng(5);
    Tensor t = rand_uniform({2, 1, 1, 3}, rng, -2.0, 2.0);
    Tensor d = subsample_spatial(t, 2);
    CHECK(d.shape() == t.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i) CHECK(d.values()[i] == t.values()[i]);
}

TEST_CASE("naive subsample keeps even spatial indices") {
    // Values encode the spatial index so kept positions are visible.
    const std::int64_t s = 4;
    std::vector<double> data(static_cast<std::size_t>(s * s));
    for (std::int64_t y = 0; y < s; ++y) {
        for (std::int64_t x = 0; x < s; ++x) data[static_cast<std::size_t>(y * s + x)] = y * 10 + x;
    }
    Tensor t = Tensor::from_data({1, s, s, 1}, data);
    Tensor d = subsample_spatial(t, 2);
    CHECK(d.shape() == Shape{1, 2, 2, 1});
    CHECK(d.at({0, 0, 0, 0}) == 0.0);
    CHECK(d.at({0, 0, 1, 0}) == 2.0);
    CHECK(d.at({0, 1, 0, 0}) == 20.0);
    CHECK(d.at({0, 1, 1, 0}) == 22.0);
}

TEST_CASE("naive subsample output size is ceil(s/2) for all s") {
    for (std::int64_t s = 1; s <= 9; ++s) {
        Tensor t = Tensor::zeros({1, s, s, 2});
        Tensor d = subsample_spatial(t, 2);
        CHECK(d.dim(1) == (s + 1) / 2);
        CHECK(d.dim(2) == (s + 1) / 2);
    }
}

TEST_CASE("gap reduces constant tensor to its value") {
    Tensor t = Tensor::full({2, 5, 5, 3}, -0.75);
    Tensor g = global_avg_pool(t);
    CHECK(g.shape() == Shape{2, 1, 1, 3});
    for (std::int64_t i = 0; i < g.numel(); ++i) CHECK(g.values()[i] == doctest::Approx(-0.75));
}

TEST_CASE("max_pool2 shapes and replicate edge") {
    Tensor t = Tensor::from_data({1, 3, 3, 1}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor p = max_pool2(t);
    CHECK(p.shape() == Shape{1, 2, 2, 1});
    CHECK(p.at({0, 0, 0, 0}) == 5.0);
    CHECK(p.at({0, 0, 1, 0}) == 6.0);  // right edge replicates column 2
    CHECK(p.at({0, 1, 0, 0}) == 8.0);
    CHECK(p.at({0, 1, 1, 0}) == 9.0);
}

TEST_CASE("ops are deterministic") {
    Rng rng_a(99);
    Rng rng_b(99);
    Tensor xa = rand_uniform({3, 6, 6, 4}, rng_a, -2.0, 2.0);
    Tensor xb = rand_uniform({3, 6, 6, 4}, rng_b, -2.0, 2.0);
    Tensor wa = rand_uniform({3, 3, 4, 4}, rng_a, -1.0, 1.0);
    Tensor wb = rand_uniform({3, 3, 4, 4}, rng_b, -1.0, 1.0);
    Tensor ya = conv2d(xa, wa, Tensor(), 2, 1);
    Tensor yb = conv2d(xb, wb, Tensor(), 2, 1);
    REQUIRE(ya.numel() == yb.numel());
    for (std::int64_t i = 0; i < ya.numel(); ++i) CHECK(ya.values()[i] == yb.values()[i]);
}

TEST_CASE("results stay finite on finite inputs") {
    Rng rng(23);
    Tensor x = rand_uniform({2, 8, 8, 3}, rng, -2.0, 2.0);
    Tensor w = rand_uniform({3, 3, 3, 5}, rng, -2.0, 2.0);
    Tensor y = conv2d(x, w, Tensor(), 2, 1);
    CHECK(all_finite(y));
    CHECK(all_finite(scaled_softmax(reshape(y, {y.numel() / 5, 5}), 5.0)));
    CHECK(all_finite(max_pool2(y)));
}

TEST_CASE("grad_check sum of x") {
    Rng rng(31);
    Tensor x = rand_uniform({4, 3}, rng, -2.0, 2.0, true);
    auto res = grad_check([&] { return sum(x); }, {x}, rng, 12);
    CHECK(res.max_rel_error < 1e-10);
    x.zero_grad();
    sum(x).backward();
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 1.0);
}

TEST_CASE("grad_check softmax sums to constant") {
    Rng rng(37);
    Tensor x = rand_uniform({6}, rng, -2.0, 2.0, true);
    auto res = grad_check([&] { return sum(scaled_softmax(x, 2.0)); }, {x}, rng, 6);
    CHECK(res.max_rel_error < 1e-6);
    x.zero_grad();
    sum(scaled_softmax(x, 2.0)).backward();
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(std::abs(x.grad()[i]) < 1e-12);
}

TEST_CASE("grad_check every forward op") {
    Rng rng(41);
    Tensor a = rand_uniform({3, 4}, rng, -2.0, 2.0, true);
    Tensor b = rand_uniform({3, 4}, rng, -2.0, 2.0, true);
    Tensor m = rand_uniform({4, 5}, rng, -2.0, 2.0, true);
    Tensor x4 = rand_uniform({2, 5, 5, 3}, rng, -2.0, 2.0, true);
    Tensor cw = rand_uniform({3, 3, 3, 4}, rng, -1.0, 1.0, true);
    Tensor cb = rand_uniform({4}, rng, -1.0, 1.0, true);
    Tensor feat = rand_uniform({6, 6, 3}, rng, -2.0, 2.0, true);

    struct Case {
        const char* name;
        std::function<Tensor()> f;
        std::vector<Tensor> params;
    };
    const std::vector<Case> cases = {
        {"add", [&] { return sum(mul(add(a, b), b)); }, {a, b}},
        {"sub", [&] { return sum(mul(sub(a, b), a)); }, {a, b}},
        {"scale", [&] { return sum(scale(a, -1.7)); }, {a}},
        {"relu", [&] { return sum(relu(a)); }, {a}},
        {"matmul", [&] { return sum(mul(matmul(a, m), matmul(a, m))); }, {a, m}},
        {"matmul_nt", [&] { return sum(matmul_nt(a, b)); }, {a, b}},
        {"transpose", [&] { return sum(mul(transpose2d(a), transpose2d(b))); }, {a, b}},
        {"linear", [&] { return sum(linear(a, m, Tensor())); }, {a, m}},
        {"reshape", [&] { return sum(mul(reshape(a, {4, 3}), reshape(b, {4, 3}))); }, {a, b}},
        {"softmax", [&] { return sum(mul(scaled_softmax(a, 3.0), b)); }, {a, b}},
        {"conv2d", [&] { return sum(conv2d(x4, cw, cb, 2, 1)); }, {x4, cw, cb}},
        {"subsample", [&] { return sum(mul(subsample_spatial(x4, 2), subsample_spatial(x4, 2))); },
         {x4}},
        {"max_pool2", [&] { return sum(max_pool2(x4)); }, {x4}},
        {"replicate_pad", [&] { return sum(replicate_pad_to_even(x4)); }, {x4}},
        {"spatial_mean", [&] { return sum(spatial_mean(x4)); }, {x4}},
        {"gap", [&] { return sum(global_avg_pool(x4)); }, {x4}},
        {"stack0", [&] { return sum(mul(stack0({a, b}), stack0({b, a}))); }, {a, b}},
        {"gather",
         [&] {
             return sum(gather(a, {0, 5, 11, 5}, {4}));
         },
         {a}},
        {"roi_bilinear", [&] { return sum(roi_bilinear(feat, 3.0, 2.0, 20.0, 17.0, 3, 4.0)); },
         {feat}},
        {"cross_entropy", [&] { return cross_entropy(a, {1, 3, 0}); }, {a}},
        {"bce", [&] { return bce_with_logits(reshape(a, {12}),
                                             std::vector<double>(12, 0.3)); }, {a}},
        {"smooth_l1",
         [&] {
             return smooth_l1_sum(a, std::vector<double>(12, 0.25), 1.0);
         },
         {a}},
        {"mean", [&] { return mean(mul(a, a)); }, {a}},
        {"channel_norm",
         [&] {
             Tensor g = reshape(gather(m, {0, 1, 2, 3}, {4}), {4});
             Tensor be = reshape(gather(m, {4, 5, 6, 7}, {4}), {4});
             return sum(mul(channel_norm(a, g, be), b));
         },
         {a, b, m}},
    };
    for (const auto& c : cases) {
        CAPTURE(c.name);
        auto res = grad_check(c.f, c.params, rng, 8);
        CHECK_MESSAGE(res.max_rel_error < 1e-4, c.name, " worst ", res.worst, " err ",
                      res.max_rel_error);
    }
}

TEST_CASE("gradient accumulates when a tensor is used twice") {
    Tensor x = Tensor::from_data({1}, {3.0}, true);
    Tensor y = mul(x, x);
    y.backward();
    CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_SUITE_END();
