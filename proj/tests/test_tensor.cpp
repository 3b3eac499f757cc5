#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support.hpp"
#include "volnet/tensor.hpp"

using namespace volnet;
using testsupport::max_rel_err;
using testsupport::naive_conv3d;
using testsupport::random_tensor;

TEST_CASE("tensor construction and invariants") {
    Tensor t({2, 3, 4});
    CHECK(t.size() == 24);
    CHECK_THROWS_AS(Tensor({2, 0, 4}), ShapeError);
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0f, 2.0f, 3.0f}), ShapeError);
}

TEST_CASE("conv3d identity kernel") {
    auto input = random_tensor<float>({1, 1, 3, 4, 5}, 7);
    Tensor weight = Tensor::from_data({1, 1, 1, 1, 1}, {1.0f});
    Tensor bias({1});
    ConvSpec spec;
    spec.kernel = {1, 1, 1};
    auto out = conv3d_forward(input, weight, bias, spec);
    REQUIRE(out.shape() == input.shape());
    for (size_t i = 0; i < out.size(); ++i) CHECK(out[i] == input[i]);
}

TEST_CASE("conv3d zero kernel gives constant bias") {
    auto input = random_tensor<float>({2, 2, 3, 3, 3}, 9);
    Tensor weight({3, 2, 3, 3, 3});
    Tensor bias = Tensor::from_data({3}, {1.5f, -2.0f, 0.25f});
    ConvSpec spec;
    spec.padding = {1, 1, 1};
    auto out = conv3d_forward(input, weight, bias, spec);
    for (size_t n = 0; n < 2; ++n)
        for (size_t co = 0; co < 3; ++co)
            for (size_t i = 0; i < 27; ++i) CHECK(out[(n * 3 + co) * 27 + i] == bias[co]);
}

TEST_CASE("conv3d matches naive 7-loop oracle") {
    auto input = random_tensor<double>({1, 2, 4, 4, 4}, 11);
    auto weight = random_tensor<double>({3, 2, 3, 3, 3}, 13);
    auto bias = random_tensor<double>({3}, 17);
    ConvSpec spec;
    spec.padding = {1, 1, 1};
    auto got = conv3d_forward(input, weight, bias, spec);
    auto want = naive_conv3d(input, weight, bias, spec);
    CHECK(max_rel_err(got, want) <= 1e-6);
}

TEST_CASE("conv3d errors") {
    Tensor input({1, 2, 4, 4, 4});
    Tensor weight({3, 3, 3, 3, 3});  // wrong in_channels
    ConvSpec spec;
    CHECK_THROWS_AS(conv3d_forward(input, weight, Tensor(), spec), ShapeError);

    Tensor w2({3, 2, 3, 3, 3});
    Tensor small({1, 2, 2, 4, 4});  // depth 2 < kernel 3, no padding
    CHECK_THROWS_AS(conv3d_forward(small, w2, Tensor(), spec), DegenerateOutputError);
}

TEST_CASE("conv3d is linear in its input") {
    auto input = random_tensor<double>({1, 2, 4, 4, 4}, 23);
    auto weight = random_tensor<double>({2, 2, 3, 3, 3}, 29);
    ConvSpec spec;
    spec.padding = {1, 1, 1};
    TensorT<double> scaled(input.shape());
    for (size_t i = 0; i < input.size(); ++i) scaled[i] = 3.0 * input[i];
    auto a = conv3d_forward(scaled, weight, TensorT<double>(), spec);
    auto b = conv3d_forward(input, weight, TensorT<double>(), spec);
    for (size_t i = 0; i < b.size(); ++i) b[i] *= 3.0;
    CHECK(max_rel_err(a, b) <= 1e-6);
}

TEST_CASE("conv3d_backward zero upstream gradient") {
    auto input = random_tensor<float>({1, 1, 3, 3, 3}, 31);
    auto weight = random_tensor<float>({2, 1, 3, 3, 3}, 37);
    ConvSpec spec;
    spec.padding = {1, 1, 1};
    Tensor grad_out({1, 2, 3, 3, 3});
    auto g = conv3d_backward(input, weight, spec, grad_out);
    for (size_t i = 0; i < g.grad_input.size(); ++i) CHECK(g.grad_input[i] == 0.0f);
    for (size_t i = 0; i < g.grad_weight.size(); ++i) CHECK(g.grad_weight[i] == 0.0f);
    for (size_t i = 0; i < g.grad_bias.size(); ++i) CHECK(g.grad_bias[i] == 0.0f);
}

TEST_CASE("conv3d_backward identity kernel passes gradient through") {
    auto input = random_tensor<float>({1, 1, 3, 3, 3}, 41);
    Tensor weight = Tensor::from_data({1, 1, 1, 1, 1}, {1.0f});
    ConvSpec spec;
    spec.kernel = {1, 1, 1};
    auto grad_out = random_tensor<float>({1, 1, 3, 3, 3}, 43);
    auto g = conv3d_backward(input, weight, spec, grad_out);
    for (size_t i = 0; i < grad_out.size(); ++i) CHECK(g.grad_input[i] == grad_out[i]);
}

TEST_CASE("conv3d_backward matches finite differences") {
    auto input = random_tensor<double>({1, 1, 3, 3, 3}, 53);
    auto weight = random_tensor<double>({2, 1, 3, 3, 3}, 59);
    auto bias = random_tensor<double>({2}, 61);
    ConvSpec spec;
    spec.padding = {1, 1, 1};
    auto grad_out = random_tensor<double>({1, 2, 3, 3, 3}, 67);

    auto objective = [&]() {
        auto out = conv3d_forward(input, weight, bias, spec);
        double s = 0;
        for (size_t i = 0; i < out.size(); ++i) s += out[i] * grad_out[i];
        return s;
    };
    auto g = conv3d_backward(input, weight, spec, grad_out);
    CHECK(testsupport::grad_check(g.grad_input, testsupport::finite_diff(objective, input)) <= 1e-4);
    CHECK(testsupport::grad_check(g.grad_weight, testsupport::finite_diff(objective, weight)) <= 1e-4);
    CHECK(testsupport::grad_check(g.grad_bias, testsupport::finite_diff(objective, bias)) <= 1e-4);
}

TEST_CASE("maxpool3d constant and ramp fields") {
    Tensor c({1, 1, 4, 4, 4}, 2.5f);
    auto r = maxpool3d(c, {2, 2, 2}, {2, 2, 2});
    for (size_t i = 0; i < r.output.size(); ++i) CHECK(r.output[i] == 2.5f);

    Tensor ramp({1, 1, 4, 4, 4});
    for (size_t i = 0; i < ramp.size(); ++i) ramp[i] = static_cast<float>(i);
    auto rr = maxpool3d(ramp, {2, 2, 2}, {2, 2, 2});
    // each window's maximum sits at its last corner on a monotone field
    for (size_t oz = 0; oz < 2; ++oz)
        for (size_t oy = 0; oy < 2; ++oy)
            for (size_t ox = 0; ox < 2; ++ox) {
                const size_t corner = (2 * oz + 1) * 16 + (2 * oy + 1) * 4 + (2 * ox + 1);
                CHECK(rr.output[(oz * 2 + oy) * 2 + ox] == ramp[corner]);
            }
}

TEST_CASE("maxpool3d matches brute-force scan and conserves gradient mass") {
    auto input = random_tensor<float>({1, 1, 4, 4, 4}, 71);
    auto r = maxpool3d(input, {3, 3, 3}, {1, 1, 1});
    for (size_t oz = 0; oz < 2; ++oz)
        for (size_t oy = 0; oy < 2; ++oy)
            for (size_t ox = 0; ox < 2; ++ox) {
                float best = -1e30f;
                for (size_t a = 0; a < 3; ++a)
                    for (size_t b = 0; b < 3; ++b)
                        for (size_t c = 0; c < 3; ++c)
                            best = std::max(best, input[(oz + a) * 16 + (oy + b) * 4 + (ox + c)]);
                CHECK(r.output[(oz * 2 + oy) * 2 + ox] == best);
            }

    auto grad_out = random_tensor<float>({1, 1, 2, 2, 2}, 73);
    auto gi = maxpool3d_backward(r, grad_out);
    double in_sum = 0, out_sum = 0;
    for (size_t i = 0; i < gi.size(); ++i) in_sum += gi[i];
    for (size_t i = 0; i < grad_out.size(); ++i) out_sum += grad_out[i];
    CHECK(in_sum == doctest::Approx(out_sum).epsilon(1e-6));
}

TEST_CASE("maxpool3d tie-breaking picks the lowest flat index") {
    Tensor t({1, 1, 2, 2, 2}, 1.0f);
    auto r = maxpool3d(t, {2, 2, 2}, {2, 2, 2});
    CHECK(r.argmax[0] == 0);
    CHECK_THROWS_AS(maxpool3d(t, {3, 3, 3}, {1, 1, 1}), DegenerateOutputError);
}

TEST_CASE("global_avg_pool3d") {
    Tensor c({2, 3, 2, 2, 2}, 4.0f);
    auto out = global_avg_pool3d(c);
    for (size_t i = 0; i < out.size(); ++i) CHECK(out[i] == 4.0f);

    Tensor impulse({1, 1, 2, 2, 2});
    impulse[5] = 1.0f;
    CHECK(global_avg_pool3d(impulse)[0] == doctest::Approx(1.0 / 8.0));

    auto r = random_tensor<double>({2, 3, 3, 4, 5}, 79);
    auto got = global_avg_pool3d(r);
    for (size_t nc = 0; nc < 6; ++nc) {
        double s = 0;
        for (size_t i = 0; i < 60; ++i) s += r[nc * 60 + i];
        CHECK(testsupport::rel_err(got[nc], s / 60.0) <= 1e-12);
    }
}

TEST_CASE("channel_scale") {
    auto input = random_tensor<float>({2, 3, 2, 2, 2}, 83);
    Tensor ones({2, 3}, 1.0f);
    auto same = channel_scale(input, ones);
    for (size_t i = 0; i < input.size(); ++i) CHECK(same[i] == input[i]);

    Tensor halves({2, 3}, 0.5f);
    auto half = channel_scale(input, halves);
    for (size_t i = 0; i < input.size(); ++i) CHECK(half[i] == 0.5f * input[i]);

    auto w = random_tensor<float>({2, 3}, 89);
    auto out = channel_scale(input, w);
    for (size_t n = 0; n < 2; ++n)
        for (size_t c = 0; c < 3; ++c)
            for (size_t i = 0; i < 8; ++i)
                CHECK(out[(n * 3 + c) * 8 + i] == w[n * 3 + c] * input[(n * 3 + c) * 8 + i]);

    Tensor bad({2, 4});
    CHECK_THROWS_AS(channel_scale(input, bad), ShapeError);
}

TEST_CASE("matmul and elementwise ops") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    auto b = random_tensor<float>({2, 3}, 97);
    auto out = matmul(eye, b);
    for (size_t i = 0; i < b.size(); ++i) CHECK(out[i] == b[i]);

    auto a = random_tensor<double>({3, 4}, 101);
    auto b2 = random_tensor<double>({4, 2}, 103);
    auto got = matmul(a, b2);
    for (size_t i = 0; i < 3; ++i)
        for (size_t j = 0; j < 2; ++j) {
            double s = 0;
            for (size_t k = 0; k < 4; ++k) s += a[i * 4 + k] * b2[k * 2 + j];
            CHECK(testsupport::rel_err(got[i * 2 + j], s) <= 1e-12);
        }

    Tensor r = relu(Tensor::from_data({3}, {-1.0f, 0.0f, 2.0f}));
    CHECK(r[0] == 0.0f);
    CHECK(r[1] == 0.0f);
    CHECK(r[2] == 2.0f);

    CHECK_THROWS_AS(matmul(a, random_tensor<double>({3, 2}, 1)), ShapeError);
}

TEST_CASE("matmul and relu backwards match finite differences") {
    auto a = random_tensor<double>({3, 4}, 107);
    auto b = random_tensor<double>({4, 2}, 109);
    auto grad_out = random_tensor<double>({3, 2}, 113);
    auto objective = [&]() {
        auto out = matmul(a, b);
        double s = 0;
        for (size_t i = 0; i < out.size(); ++i) s += out[i] * grad_out[i];
        return s;
    };
    auto [ga, gb] = matmul_backward(a, b, grad_out);
    CHECK(testsupport::grad_check(ga, testsupport::finite_diff(objective, a)) <= 1e-4);
    CHECK(testsupport::grad_check(gb, testsupport::finite_diff(objective, b)) <= 1e-4);

    auto x = random_tensor<double>({2, 5}, 127);
    auto g = random_tensor<double>({2, 5}, 131);
    auto relu_obj = [&]() {
        auto out = relu(x);
        double s = 0;
        for (size_t i = 0; i < out.size(); ++i) s += out[i] * g[i];
        return s;
    };
    CHECK(testsupport::grad_check(relu_backward(x, g),
                                  testsupport::finite_diff(relu_obj, x)) <= 1e-4);
}

TEST_CASE("ops are deterministic across repeat calls") {
    auto input = random_tensor<float>({1, 2, 4, 4, 4}, 137);
    auto weight = random_tensor<float>({2, 2, 3, 3, 3}, 139);
    ConvSpec spec;
    spec.padding = {1, 1, 1};
    auto a = conv3d_forward(input, weight, Tensor(), spec);
    auto b = conv3d_forward(input, weight, Tensor(), spec);
    CHECK(a.vec() == b.vec());
}
