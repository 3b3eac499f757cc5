#ifndef VOLNET_NN_HPP
#define VOLNET_NN_HPP

#include <cmath>
#include <string>
#include <utility>

#include "volnet/rng.hpp"
#include "volnet/tensor.hpp"

namespace volnet {

struct InsufficientBatchError : std::runtime_error {
    explicit InsufficientBatchError(const std::string& msg) : std::runtime_error(msg) {}
};

struct LabelRangeError : std::runtime_error {
    explicit LabelRangeError(const std::string& msg) : std::runtime_error(msg) {}
};

template <class T>
struct ParamTensorT {
    std::string name;
    TensorT<T> value;
    TensorT<T> grad;
    bool trainable = true;

    ParamTensorT() = default;
    ParamTensorT(std::string n, TensorT<T> v, bool train = true)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(train) {}

    void zero_grad() { std::fill(grad.vec().begin(), grad.vec().end(), T(0)); }
};

using ParamTensor = ParamTensorT<float>;

// Zero-mean normal with std sqrt(2/fan_in); samples are always drawn in
// double so float and double builds see the same stream.
template <class T>
TensorT<T> he_init(const std::vector<size_t>& shape, size_t fan_in, uint64_t seed) {
    if (fan_in < 1) throw ShapeError("he_init fan_in must be >= 1");
    CounterRng rng(seed);
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    TensorT<T> out(shape);
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<T>(rng.next_normal() * std);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over N,D,H,W per channel.
// ---------------------------------------------------------------------------

template <class T>
struct BnRefs {
    ParamTensorT<T>* gamma = nullptr;
    ParamTensorT<T>* beta = nullptr;
    ParamTensorT<T>* running_mean = nullptr;  // non-trainable
    ParamTensorT<T>* running_var = nullptr;   // non-trainable
    T momentum = T(0.1);
    T eps = T(1e-5);
};

template <class T>
struct BnCache {
    TensorT<T> input;
    std::vector<T> mean;    // per channel, the stats used for normalization
    std::vector<T> invstd;  // 1/sqrt(var+eps)
    bool training = false;
};

template <class T>
std::pair<TensorT<T>, BnCache<T>> batchnorm3d_forward(const TensorT<T>& input,
                                                      BnRefs<T>& bn, bool training) {
    if (input.ndim() != 5) throw ShapeError("batchnorm3d input must be 5-D, got " + input.shape_str());
    const size_t N = input.dim(0), C = input.dim(1);
    const size_t V = input.dim(2) * input.dim(3) * input.dim(4);
    detail::check_axis(bn.gamma->value.dim(0), C, "batchnorm gamma", "C");
    const size_t M = N * V;  // samples per channel
    if (training && M < 2) {
        throw InsufficientBatchError("batch norm training mode needs N*D*H*W >= 2, got " +
                                     std::to_string(M));
    }

    BnCache<T> cache;
    cache.input = input;
    cache.training = training;
    cache.mean.resize(C);
    cache.invstd.resize(C);

    for (size_t c = 0; c < C; ++c) {
        T mean, var;
        if (training) {
            T s = 0;
            for (size_t n = 0; n < N; ++n) {
                const T* p = input.data() + (n * C + c) * V;
                for (size_t i = 0; i < V; ++i) s += p[i];
            }
            mean = s / static_cast<T>(M);
            T vs = 0;
            for (size_t n = 0; n < N; ++n) {
                const T* p = input.data() + (n * C + c) * V;
                for (size_t i = 0; i < V; ++i) {
                    const T d = p[i] - mean;
                    vs += d * d;
                }
            }
            var = vs / static_cast<T>(M);
            bn.running_mean->value[c] =
                (T(1) - bn.momentum) * bn.running_mean->value[c] + bn.momentum * mean;
            bn.running_var->value[c] =
                (T(1) - bn.momentum) * bn.running_var->value[c] + bn.momentum * var;
        } else {
            mean = bn.running_mean->value[c];
            var = bn.running_var->value[c];
        }
        cache.mean[c] = mean;
        cache.invstd[c] = T(1) / std::sqrt(var + bn.eps);
    }

    TensorT<T> out(input.shape());
    for (size_t n = 0; n < N; ++n) {
        for (size_t c = 0; c < C; ++c) {
            const T g = bn.gamma->value[c], b = bn.beta->value[c];
            const T mu = cache.mean[c], is = cache.invstd[c];
            const T* p = input.data() + (n * C + c) * V;
            T* o = out.data() + (n * C + c) * V;
            for (size_t i = 0; i < V; ++i) o[i] = g * (p[i] - mu) * is + b;
        }
    }
    return {std::move(out), std::move(cache)};
}

// Accumulates grad_gamma/grad_beta into the param grads when accumulate is
// set; returns grad_input either way.
template <class T>
TensorT<T> batchnorm3d_backward(const BnCache<T>& cache, BnRefs<T>& bn,
                                const TensorT<T>& grad_out, bool accumulate = true) {
    const TensorT<T>& x = cache.input;
    if (!grad_out.same_shape(x)) {
        throw ShapeError("batchnorm3d_backward grad_out shape " + grad_out.shape_str() +
                         " does not match input " + x.shape_str());
    }
    const size_t N = x.dim(0), C = x.dim(1);
    const size_t V = x.dim(2) * x.dim(3) * x.dim(4);
    const size_t M = N * V;

    TensorT<T> gi(x.shape());
    for (size_t c = 0; c < C; ++c) {
        const T mu = cache.mean[c], is = cache.invstd[c];
        const T g = bn.gamma->value[c];
        T dbeta = 0, dgamma = 0;
        for (size_t n = 0; n < N; ++n) {
            const T* xp = x.data() + (n * C + c) * V;
            const T* gp = grad_out.data() + (n * C + c) * V;
            for (size_t i = 0; i < V; ++i) {
                dbeta += gp[i];
                dgamma += gp[i] * (xp[i] - mu) * is;
            }
        }
        if (cache.training) {
            const T k = g * is / static_cast<T>(M);
            for (size_t n = 0; n < N; ++n) {
                const T* xp = x.data() + (n * C + c) * V;
                const T* gp = grad_out.data() + (n * C + c) * V;
                T* gip = gi.data() + (n * C + c) * V;
                for (size_t i = 0; i < V; ++i) {
                    const T xhat = (xp[i] - mu) * is;
                    gip[i] = k * (static_cast<T>(M) * gp[i] - dbeta - xhat * dgamma);
                }
            }
        } else {
            // running stats are constants in inference mode
            const T k = g * is;
            for (size_t n = 0; n < N; ++n) {
                const T* gp = grad_out.data() + (n * C + c) * V;
                T* gip = gi.data() + (n * C + c) * V;
                for (size_t i = 0; i < V; ++i) gip[i] = k * gp[i];
            }
        }
        if (accumulate) {
            bn.gamma->grad[c] += dgamma;
            bn.beta->grad[c] += dbeta;
        }
    }
    return gi;
}

// ---------------------------------------------------------------------------
// Linear layer
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> linear_forward(const TensorT<T>& input, const TensorT<T>& weight,
                          const TensorT<T>& bias) {
    if (input.ndim() != 2) throw ShapeError("linear input must be 2-D, got " + input.shape_str());
    detail::check_axis(weight.dim(0), input.dim(1), "linear weight", "F");
    TensorT<T> out = matmul(input, weight);
    if (bias.size() != 0) {
        detail::check_axis(bias.dim(0), weight.dim(1), "linear bias", "O");
        const size_t N = out.dim(0), O = out.dim(1);
        for (size_t n = 0; n < N; ++n) {
            for (size_t o = 0; o < O; ++o) out[n * O + o] += bias[o];
        }
    }
    return out;
}

template <class T>
struct LinearGrads {
    TensorT<T> grad_input;
    TensorT<T> grad_weight;
    TensorT<T> grad_bias;
};

template <class T>
LinearGrads<T> linear_backward(const TensorT<T>& input, const TensorT<T>& weight,
                               const TensorT<T>& grad_out) {
    auto [gi, gw] = matmul_backward(input, weight, grad_out);
    LinearGrads<T> g{std::move(gi), std::move(gw), TensorT<T>({weight.dim(1)})};
    const size_t N = grad_out.dim(0), O = grad_out.dim(1);
    for (size_t n = 0; n < N; ++n) {
        for (size_t o = 0; o < O; ++o) g.grad_bias[o] += grad_out[n * O + o];
    }
    return g;
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy (mean over batch)
// ---------------------------------------------------------------------------

template <class T>
struct SoftmaxCEResult {
    T loss = 0;
    TensorT<T> grad_logits;
    TensorT<T> probs;
};

template <class T>
SoftmaxCEResult<T> softmax_cross_entropy(const TensorT<T>& logits,
                                         const std::vector<size_t>& labels) {
    if (logits.ndim() != 2) throw ShapeError("softmax logits must be 2-D, got " + logits.shape_str());
    const size_t N = logits.dim(0), K = logits.dim(1);
    if (labels.size() != N) {
        throw ShapeError("softmax labels length " + std::to_string(labels.size()) +
                         " does not match batch " + std::to_string(N));
    }
    SoftmaxCEResult<T> r;
    r.probs = TensorT<T>({N, K});
    r.grad_logits = TensorT<T>({N, K});
    double loss = 0;
    for (size_t n = 0; n < N; ++n) {
        if (labels[n] >= K) {
            throw LabelRangeError("label " + std::to_string(labels[n]) + " out of range [0," +
                                  std::to_string(K) + ") at row " + std::to_string(n));
        }
        const T* row = logits.data() + n * K;
        T mx = row[0];
        for (size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double denom = 0;
        for (size_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(row[k] - mx));
        const double logdenom = std::log(denom);
        for (size_t k = 0; k < K; ++k) {
            const double p = std::exp(static_cast<double>(row[k] - mx)) / denom;
            r.probs[n * K + k] = static_cast<T>(p);
            r.grad_logits[n * K + k] =
                static_cast<T>((p - (k == labels[n] ? 1.0 : 0.0)) / static_cast<double>(N));
        }
        loss += logdenom - static_cast<double>(row[labels[n]] - mx);
    }
    r.loss = static_cast<T>(loss / static_cast<double>(N));
    return r;
}

// ---------------------------------------------------------------------------
// ResNet basic block:
//   out = relu(BN2(conv2(relu(BN1(conv1(x))))) + shortcut(x))
// shortcut is identity when shapes match, otherwise 1x1x1 conv + BN with the
// block stride. Convolutions carry no bias (BN beta subsumes it).
// ---------------------------------------------------------------------------

template <class T>
struct BlockRefs {
    ParamTensorT<T>* conv1_w = nullptr;
    BnRefs<T> bn1;
    ParamTensorT<T>* conv2_w = nullptr;
    BnRefs<T> bn2;
    ParamTensorT<T>* shortcut_w = nullptr;  // null => identity shortcut
    BnRefs<T> shortcut_bn;
    size_t stride = 1;  // applied by conv1 and the shortcut
};

template <class T>
struct BlockCache {
    TensorT<T> input;
    BnCache<T> bn1;
    TensorT<T> relu1_in;  // BN1 output
    TensorT<T> relu1_out;
    BnCache<T> bn2;
    TensorT<T> sum;  // pre final relu
    BnCache<T> shortcut_bn;
    bool has_shortcut = false;
};

template <class T>
std::pair<TensorT<T>, BlockCache<T>> residual_block_forward(const TensorT<T>& x,
                                                            BlockRefs<T>& refs,
                                                            bool training) {
    BlockCache<T> cache;
    cache.input = x;
    cache.has_shortcut = refs.shortcut_w != nullptr;

    ConvSpec c1;
    c1.kernel = {refs.conv1_w->value.dim(2), refs.conv1_w->value.dim(3), refs.conv1_w->value.dim(4)};
    c1.stride = {refs.stride, refs.stride, refs.stride};
    c1.padding = {c1.kernel[0] / 2, c1.kernel[1] / 2, c1.kernel[2] / 2};
    TensorT<T> h = conv3d_forward(x, refs.conv1_w->value, TensorT<T>(), c1);

    auto [bn1_out, bn1_cache] = batchnorm3d_forward(h, refs.bn1, training);
    cache.bn1 = std::move(bn1_cache);
    cache.relu1_in = bn1_out;
    cache.relu1_out = relu(bn1_out);

    ConvSpec c2;
    c2.kernel = {refs.conv2_w->value.dim(2), refs.conv2_w->value.dim(3), refs.conv2_w->value.dim(4)};
    c2.stride = {1, 1, 1};
    c2.padding = {c2.kernel[0] / 2, c2.kernel[1] / 2, c2.kernel[2] / 2};
    TensorT<T> h2 = conv3d_forward(cache.relu1_out, refs.conv2_w->value, TensorT<T>(), c2);

    auto [bn2_out, bn2_cache] = batchnorm3d_forward(h2, refs.bn2, training);
    cache.bn2 = std::move(bn2_cache);

    TensorT<T> sc;
    if (cache.has_shortcut) {
        ConvSpec cs;
        cs.kernel = {1, 1, 1};
        cs.stride = {refs.stride, refs.stride, refs.stride};
        cs.padding = {0, 0, 0};
        TensorT<T> s = conv3d_forward(x, refs.shortcut_w->value, TensorT<T>(), cs);
        auto [sbn_out, sbn_cache] = batchnorm3d_forward(s, refs.shortcut_bn, training);
        cache.shortcut_bn = std::move(sbn_cache);
        sc = std::move(sbn_out);
    } else {
        sc = x;
    }

    cache.sum = add(bn2_out, sc);
    return {relu(cache.sum), std::move(cache)};
}

template <class T>
TensorT<T> residual_block_backward(BlockCache<T>& cache, BlockRefs<T>& refs,
                                   const TensorT<T>& grad_out, bool accumulate = true) {
    TensorT<T> g_sum = relu_backward(cache.sum, grad_out);

    // main branch
    TensorT<T> g_bn2 = batchnorm3d_backward(cache.bn2, refs.bn2, g_sum, accumulate);
    ConvSpec c2;
    c2.kernel = {refs.conv2_w->value.dim(2), refs.conv2_w->value.dim(3), refs.conv2_w->value.dim(4)};
    c2.stride = {1, 1, 1};
    c2.padding = {c2.kernel[0] / 2, c2.kernel[1] / 2, c2.kernel[2] / 2};
    auto g2 = conv3d_backward(cache.relu1_out, refs.conv2_w->value, c2, g_bn2);
    if (accumulate) {
        for (size_t i = 0; i < g2.grad_weight.size(); ++i) refs.conv2_w->grad[i] += g2.grad_weight[i];
    }
    TensorT<T> g_relu1 = relu_backward(cache.relu1_in, g2.grad_input);
    TensorT<T> g_bn1 = batchnorm3d_backward(cache.bn1, refs.bn1, g_relu1, accumulate);
    ConvSpec c1;
    c1.kernel = {refs.conv1_w->value.dim(2), refs.conv1_w->value.dim(3), refs.conv1_w->value.dim(4)};
    c1.stride = {refs.stride, refs.stride, refs.stride};
    c1.padding = {c1.kernel[0] / 2, c1.kernel[1] / 2, c1.kernel[2] / 2};
    auto g1 = conv3d_backward(cache.input, refs.conv1_w->value, c1, g_bn1);
    if (accumulate) {
        for (size_t i = 0; i < g1.grad_weight.size(); ++i) refs.conv1_w->grad[i] += g1.grad_weight[i];
    }
    TensorT<T> g_x = std::move(g1.grad_input);

    // shortcut branch
    if (cache.has_shortcut) {
        TensorT<T> g_sbn = batchnorm3d_backward(cache.shortcut_bn, refs.shortcut_bn, g_sum, accumulate);
        ConvSpec cs;
        cs.kernel = {1, 1, 1};
        cs.stride = {refs.stride, refs.stride, refs.stride};
        cs.padding = {0, 0, 0};
        auto gs = conv3d_backward(cache.input, refs.shortcut_w->value, cs, g_sbn);
        if (accumulate) {
            for (size_t i = 0; i < gs.grad_weight.size(); ++i) {
                refs.shortcut_w->grad[i] += gs.grad_weight[i];
            }
        }
        for (size_t i = 0; i < g_x.size(); ++i) g_x[i] += gs.grad_input[i];
    } else {
        for (size_t i = 0; i < g_x.size(); ++i) g_x[i] += g_sum[i];
    }
    return g_x;
}

}  // namespace volnet

#endif
