#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include <capsdemm/ops.hpp>
#include <capsdemm/rng.hpp>

#include "support.hpp"

using capsdemm::Rng;
using capsdemm::Tape;
using capsdemm::Tensor;
using testsupport::conv_oracle;
using testsupport::distinct_tensor;
using testsupport::max_rel_grad_error;
using testsupport::random_tensor;

namespace {
constexpr double kGradTol = 1e-4;
}

TEST_CASE("conv2d forward matches the six-loop reference") {
    Rng rng(1);
    struct Case {
        int n, c, h, w, f, k, stride, pad;
    };
    for (const Case t : {Case{1, 1, 5, 5, 1, 3, 1, 0}, Case{2, 3, 7, 6, 4, 3, 1, 1},
                         Case{1, 2, 9, 9, 3, 5, 2, 2}, Case{2, 2, 8, 5, 2, 2, 3, 0},
                         Case{1, 4, 6, 6, 5, 1, 1, 0}}) {
        Tensor<double> x = random_tensor(rng, {t.n, t.c, t.h, t.w});
        Tensor<double> k = random_tensor(rng, {t.f, t.c, t.k, t.k});
        Tensor<double> b = random_tensor(rng, {t.f});
        Tensor<double> got = capsdemm::conv2d(x, k, b, t.stride, t.pad);
        Tensor<double> want = conv_oracle(x, k, b, t.stride, t.pad);
        REQUIRE(got.shape() == want.shape());
        for (std::size_t i = 0; i < got.numel(); ++i)
            REQUIRE_THAT(got.values()[i], Catch::Matchers::WithinAbs(want.values()[i], 1e-10));
    }
}

TEST_CASE("conv2d rejects malformed shapes") {
    Tensor<double> x({1, 2, 4, 4});
    Tensor<double> k({3, 2, 3, 3});
    Tensor<double> b({3});
    REQUIRE_NOTHROW(capsdemm::conv2d(x, k, b, 1, 0));
    REQUIRE_THROWS_AS(capsdemm::conv2d(x, Tensor<double>({3, 1, 3, 3}), b, 1, 0),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(capsdemm::conv2d(x, k, Tensor<double>({2}), 1, 0), std::invalid_argument);
    REQUIRE_THROWS_AS(capsdemm::conv2d(x, k, b, 0, 0), std::invalid_argument);
    REQUIRE_THROWS_AS(capsdemm::conv2d(x, k, b, 1, -1), std::invalid_argument);
    REQUIRE_THROWS_AS(capsdemm::conv2d(x, Tensor<double>({3, 2, 5, 5}), b, 1, 0),
                      std::invalid_argument);
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(2);
    for (int rep = 0; rep < 3; ++rep) {
        Tensor<double> x = random_tensor(rng, {2, 2, 5, 6});
        Tensor<double> k = random_tensor(rng, {3, 2, 3, 3});
        Tensor<double> b = random_tensor(rng, {3});
        const int stride = 1 + rep % 2, pad = rep % 2;
        const double err = max_rel_grad_error({x, k, b}, [&] {
            return capsdemm::sum_all(capsdemm::mul(capsdemm::conv2d(x, k, b, stride, pad),
                                                   capsdemm::conv2d(x, k, b, stride, pad)));
        });
        REQUIRE(err < kGradTol);
    }
}

TEST_CASE("maxpool matches a window-max reference and reports argmax") {
    Rng rng(3);
    Tensor<double> x = distinct_tensor(rng, {2, 3, 6, 7});
    const int size = 2, stride = 2;
    auto got = capsdemm::maxpool2d_with_indices(x, size, stride);
    const int N = 2, C = 3, H = 6, W = 7;
    const int Ho = (H - size) / stride + 1, Wo = (W - size) / stride + 1;
    REQUIRE(got.output.shape() == std::vector<int>{N, C, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    double best = -1e300;
                    for (int ky = 0; ky < size; ++ky)
                        for (int kx = 0; kx < size; ++kx) {
                            const std::size_t idx =
                                ((static_cast<std::size_t>(n) * C + c) * H + oy * stride + ky) * W +
                                ox * stride + kx;
                            best = std::max(best, x.values()[idx]);
                        }
                    const std::size_t oi =
                        ((static_cast<std::size_t>(n) * C + c) * Ho + oy) * Wo + ox;
                    REQUIRE(got.output.values()[oi] == best);
                    REQUIRE(x.values()[got.argmax[oi]] == best);
                }
}

TEST_CASE("maxpool ties route gradient to the first window cell") {
    Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1.0, 1.0, 1.0, 1.0});
    x.set_requires_grad(true);
    Tape<double> tape;
    Tensor<double> y = capsdemm::maxpool2d(x, 2, 2);
    Tensor<double> loss = capsdemm::sum_all(y);
    tape.backward(loss);
    REQUIRE(x.grad() == std::vector<double>{1.0, 0.0, 0.0, 0.0});
}

TEST_CASE("maxpool gradients match finite differences on distinct values") {
    Rng rng(4);
    for (int rep = 0; rep < 3; ++rep) {
        Tensor<double> x = distinct_tensor(rng, {2, 2, 6, 6});
        const double err = max_rel_grad_error({x}, [&] {
            return capsdemm::sum_all(
                capsdemm::mul(capsdemm::maxpool2d(x, 2, 2), capsdemm::maxpool2d(x, 2, 2)));
        });
        REQUIRE(err < kGradTol);
    }
}

TEST_CASE("nearest upsampling repeats pixels and sums gradients") {
    Rng rng(5);
    Tensor<double> x = random_tensor(rng, {1, 2, 3, 4});
    Tensor<double> y = capsdemm::upsample2d_nearest(x, 2);
    REQUIRE(y.shape() == std::vector<int>{1, 2, 6, 8});
    for (int c = 0; c < 2; ++c)
        for (int oy = 0; oy < 6; ++oy)
            for (int ox = 0; ox < 8; ++ox)
                REQUIRE(y.values()[(static_cast<std::size_t>(c) * 6 + oy) * 8 + ox] ==
                        x.values()[(static_cast<std::size_t>(c) * 3 + oy / 2) * 4 + ox / 2]);
    const double err = max_rel_grad_error(
        {x}, [&] { return capsdemm::sum_all(capsdemm::mul(capsdemm::upsample2d_nearest(x, 2),
                                                          capsdemm::upsample2d_nearest(x, 2))); });
    REQUIRE(err < kGradTol);
}

TEST_CASE("channel concat and slice round-trip with correct gradients") {
    Rng rng(6);
    Tensor<double> a = random_tensor(rng, {2, 2, 3, 3});
    Tensor<double> b = random_tensor(rng, {2, 3, 3, 3});
    Tensor<double> cat = capsdemm::concat_channels(a, b);
    REQUIRE(cat.shape() == std::vector<int>{2, 5, 3, 3});
    Tensor<double> back = capsdemm::slice_channels(cat, 2, 3);
    REQUIRE(back.values() == b.values());
    REQUIRE_THROWS_AS(capsdemm::concat_channels(a, Tensor<double>({2, 3, 4, 3})),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(capsdemm::slice_channels(cat, 4, 2), std::invalid_argument);
    const double err = max_rel_grad_error({a, b}, [&] {
        Tensor<double> c = capsdemm::concat_channels(a, b);
        return capsdemm::sum_all(capsdemm::mul(capsdemm::slice_channels(c, 1, 3),
                                               capsdemm::slice_channels(c, 2, 3)));
    });
    REQUIRE(err < kGradTol);
}

TEST_CASE("relu sigmoid and softmax values") {
    Tensor<double> x({4}, std::vector<double>{-2.0, -0.5, 0.0, 3.0});
    Tensor<double> r = capsdemm::relu(x);
    REQUIRE(r.values() == std::vector<double>{0.0, 0.0, 0.0, 3.0});
    Tensor<double> s = capsdemm::sigmoid(x);
    for (int i = 0; i < 4; ++i)
        REQUIRE_THAT(s.values()[static_cast<std::size_t>(i)],
                     Catch::Matchers::WithinAbs(
                         1.0 / (1.0 + std::exp(-x.values()[static_cast<std::size_t>(i)])), 1e-12));
    Tensor<double> logits({2, 3}, std::vector<double>{1.0, 2.0, 3.0, -1.0, 0.0, 1.0});
    Tensor<double> sm = capsdemm::softmax(logits, 1);
    for (int row = 0; row < 2; ++row) {
        double sum = 0;
        for (int j = 0; j < 3; ++j) sum += sm.values()[static_cast<std::size_t>(row) * 3 + j];
        REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
    // shift invariance
    Tensor<double> shifted({2, 3}, std::vector<double>{11.0, 12.0, 13.0, 99.0, 100.0, 101.0});
    Tensor<double> sm2 = capsdemm::softmax(shifted, 1);
    for (std::size_t i = 0; i < 6; ++i)
        REQUIRE_THAT(sm2.values()[i], Catch::Matchers::WithinAbs(sm.values()[i], 1e-12));
}

TEST_CASE("sigmoid slope at zero is one quarter") {
    Tensor<double> x({1}, std::vector<double>{0.0});
    x.set_requires_grad(true);
    Tape<double> tape;
    Tensor<double> loss = capsdemm::sum_all(capsdemm::sigmoid(x));
    tape.backward(loss);
    REQUIRE_THAT(x.grad()[0], Catch::Matchers::WithinAbs(0.25, 1e-12));
}

TEST_CASE("pointwise and reduction gradients match finite differences") {
    Rng rng(7);
    for (int rep = 0; rep < 4; ++rep) {
        Tensor<double> a = random_tensor(rng, {3, 4});
        Tensor<double> b = random_tensor(rng, {3, 4}, 0.5, 1.5);  // away from zero for div
        const double err = max_rel_grad_error({a, b}, [&] {
            Tensor<double> t = capsdemm::add(capsdemm::mul(a, b), capsdemm::div(a, b));
            t = capsdemm::add_const(capsdemm::scale(t, 0.7), 0.1);
            t = capsdemm::add(capsdemm::relu(t), capsdemm::sigmoid(t));
            return capsdemm::sum_all(t);
        });
        REQUIRE(err < kGradTol);
    }
}

TEST_CASE("softmax gradients match finite differences on every axis") {
    Rng rng(8);
    Tensor<double> x = random_tensor(rng, {2, 3, 4});
    for (int axis = 0; axis < 3; ++axis) {
        const double err = max_rel_grad_error({x}, [&] {
            Tensor<double> y = capsdemm::softmax(x, axis);
            return capsdemm::sum_all(capsdemm::mul(y, capsdemm::sigmoid(y)));
        });
        REQUIRE(err < kGradTol);
    }
}

TEST_CASE("topk_average selects the K largest cells") {
    Tensor<double> x({1, 6}, std::vector<double>{0.1, 0.9, 0.3, 0.7, 0.5, 0.2});
    REQUIRE_THAT(capsdemm::topk_average(x, 1).values()[0],
                 Catch::Matchers::WithinAbs(0.9, 1e-12));
    REQUIRE_THAT(capsdemm::topk_average(x, 3).values()[0],
                 Catch::Matchers::WithinAbs((0.9 + 0.7 + 0.5) / 3, 1e-12));
    REQUIRE_THAT(capsdemm::topk_average(x, 6).values()[0],
                 Catch::Matchers::WithinAbs((0.1 + 0.9 + 0.3 + 0.7 + 0.5 + 0.2) / 6, 1e-12));
    REQUIRE_THROWS_AS(capsdemm::topk_average(x, 0), std::invalid_argument);
    REQUIRE_THROWS_AS(capsdemm::topk_average(x, 7), std::invalid_argument);
}

TEST_CASE("topk_average splits tie gradients by index order") {
    Tensor<double> x({1, 3}, std::vector<double>{1.0, 1.0, 0.0});
    x.set_requires_grad(true);
    Tape<double> tape;
    Tensor<double> loss = capsdemm::sum_all(capsdemm::topk_average(x, 2));
    tape.backward(loss);
    REQUIRE(x.grad() == std::vector<double>{0.5, 0.5, 0.0});
}

TEST_CASE("topk_average mean never increases with K") {
    Rng rng(9);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor<double> x = random_tensor(rng, {1, 12}, 0.0, 1.0);
        double prev = 1e300;
        for (int k = 1; k <= 12; ++k) {
            const double v = capsdemm::topk_average(x, k).values()[0];
            REQUIRE(v <= prev + 1e-12);
            prev = v;
        }
    }
}

TEST_CASE("topk_average gradients match finite differences") {
    Rng rng(10);
    for (int rep = 0; rep < 3; ++rep) {
        Tensor<double> x = distinct_tensor(rng, {2, 9});
        const double err = max_rel_grad_error({x}, [&] {
            return capsdemm::sum_all(
                capsdemm::mul(capsdemm::topk_average(x, 4), capsdemm::topk_average(x, 4)));
        });
        REQUIRE(err < kGradTol);
    }
}

TEST_CASE("im2col and col2im_add are adjoint") {
    Rng rng(11);
    const int C = 2, H = 5, W = 6, kh = 3, kw = 3, stride = 2, pad = 1;
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    const std::size_t cols = static_cast<std::size_t>(C * kh * kw) * (Ho * Wo);
    std::vector<double> x(static_cast<std::size_t>(C) * H * W), y(cols), cx(cols),
        ax(static_cast<std::size_t>(C) * H * W, 0.0);
    for (double& v : x) v = rng.uniform(-1, 1);
    for (double& v : y) v = rng.uniform(-1, 1);
    capsdemm::detail::im2col(x.data(), C, H, W, kh, kw, stride, pad, Ho, Wo, cx.data());
    capsdemm::detail::col2im_add(y.data(), C, H, W, kh, kw, stride, pad, Ho, Wo, ax.data());
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < cols; ++i) lhs += cx[i] * y[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * ax[i];
    REQUIRE_THAT(lhs, Catch::Matchers::WithinAbs(rhs, 1e-9));
}

TEST_CASE("composed convolution network gradients match finite differences") {
    Rng rng(12);
    Tensor<double> x = random_tensor(rng, {1, 2, 8, 8});
    Tensor<double> k1 = random_tensor(rng, {3, 2, 3, 3}, -0.5, 0.5);
    Tensor<double> b1 = random_tensor(rng, {3}, -0.1, 0.1);
    Tensor<double> k2 = random_tensor(rng, {2, 3, 3, 3}, -0.5, 0.5);
    Tensor<double> b2 = random_tensor(rng, {2}, -0.1, 0.1);
    const double err = max_rel_grad_error({x, k1, b1, k2, b2}, [&] {
        Tensor<double> h = capsdemm::relu(capsdemm::conv2d(x, k1, b1, 1, 1));
        h = capsdemm::maxpool2d(h, 2, 2);
        h = capsdemm::sigmoid(capsdemm::conv2d(h, k2, b2, 1, 1));
        return capsdemm::sum_all(capsdemm::mul(h, h));
    });
    REQUIRE(err < kGradTol);
}
