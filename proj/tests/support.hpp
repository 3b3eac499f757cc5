// Shared test oracles: naive reference kernels and finite-difference
// gradient checking. Everything here is independent of the library's
// forward/backward implementations.
#ifndef VOLNET_TESTS_SUPPORT_HPP
#define VOLNET_TESTS_SUPPORT_HPP

#include <cmath>
#include <functional>
#include <vector>

#include "volnet/rng.hpp"
#include "volnet/tensor.hpp"

namespace testsupport {

using volnet::ConvSpec;
using volnet::TensorT;

template <class T>
TensorT<T> random_tensor(const std::vector<size_t>& shape, uint64_t seed, double scale = 1.0) {
    volnet::CounterRng rng(seed);
    TensorT<T> t(shape);
    for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.next_normal() * scale);
    return t;
}

// 7-nested-loop convolution reference, accumulating in double
template <class T>
TensorT<T> naive_conv3d(const TensorT<T>& input, const TensorT<T>& weight,
                        const TensorT<T>& bias, const ConvSpec& spec) {
    const size_t N = input.dim(0), Cin = input.dim(1);
    const size_t D = input.dim(2), H = input.dim(3), W = input.dim(4);
    const size_t Cout = weight.dim(0);
    const size_t kd = spec.kernel[0], kh = spec.kernel[1], kw = spec.kernel[2];
    const size_t Do = spec.out_dim(D, 0), Ho = spec.out_dim(H, 1), Wo = spec.out_dim(W, 2);
    TensorT<T> out({N, Cout, Do, Ho, Wo});
    for (size_t n = 0; n < N; ++n)
        for (size_t co = 0; co < Cout; ++co)
            for (size_t oz = 0; oz < Do; ++oz)
                for (size_t oy = 0; oy < Ho; ++oy)
                    for (size_t ox = 0; ox < Wo; ++ox) {
                        double acc = bias.size() ? static_cast<double>(bias[co]) : 0.0;
                        for (size_t ci = 0; ci < Cin; ++ci)
                            for (size_t a = 0; a < kd; ++a)
                                for (size_t b = 0; b < kh; ++b)
                                    for (size_t c = 0; c < kw; ++c) {
                                        const ptrdiff_t iz = static_cast<ptrdiff_t>(oz * spec.stride[0] + a) -
                                                             static_cast<ptrdiff_t>(spec.padding[0]);
                                        const ptrdiff_t iy = static_cast<ptrdiff_t>(oy * spec.stride[1] + b) -
                                                             static_cast<ptrdiff_t>(spec.padding[1]);
                                        const ptrdiff_t ix = static_cast<ptrdiff_t>(ox * spec.stride[2] + c) -
                                                             static_cast<ptrdiff_t>(spec.padding[2]);
                                        if (iz < 0 || iy < 0 || ix < 0 || iz >= static_cast<ptrdiff_t>(D) ||
                                            iy >= static_cast<ptrdiff_t>(H) || ix >= static_cast<ptrdiff_t>(W))
                                            continue;
                                        const double iv = input[((n * Cin + ci) * D + iz) * H * W +
                                                                static_cast<size_t>(iy) * W +
                                                                static_cast<size_t>(ix)];
                                        const double wv = weight[((co * Cin + ci) * kd + a) * kh * kw +
                                                                 b * kw + c];
                                        acc += iv * wv;
                                    }
                        out[((n * Cout + co) * Do + oz) * Ho * Wo + oy * Wo + ox] =
                            static_cast<T>(acc);
                    }
    return out;
}

inline double rel_err(double got, double want) {
    const double denom = std::max({std::fabs(got), std::fabs(want), 1e-8});
    return std::fabs(got - want) / denom;
}

template <class T>
double max_rel_err(const TensorT<T>& got, const TensorT<T>& want) {
    double m = 0;
    for (size_t i = 0; i < got.size(); ++i) {
        m = std::max(m, rel_err(got[i], want[i]));
    }
    return m;
}

// Central finite differences of a scalar objective with respect to one
// tensor, always in double precision.
inline volnet::TensorT<double> finite_diff(const std::function<double()>& objective,
                                           volnet::TensorT<double>& x, double step = 1e-5) {
    volnet::TensorT<double> g(x.shape());
    for (size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + step;
        const double fp = objective();
        x[i] = orig - step;
        const double fm = objective();
        x[i] = orig;
        g[i] = (fp - fm) / (2 * step);
    }
    return g;
}

// worst relative error between an analytic gradient and finite differences,
// with an absolute floor so near-zero entries compare sanely
inline double grad_check(const volnet::TensorT<double>& analytic,
                         const volnet::TensorT<double>& numeric, double floor = 1e-6) {
    double worst = 0;
    for (size_t i = 0; i < analytic.size(); ++i) {
        const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric[i]), floor});
        worst = std::max(worst, std::fabs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

}  // namespace testsupport

#endif
