#ifndef VOLNET_ATTENTION_HPP
#define VOLNET_ATTENTION_HPP

#include <utility>

#include "volnet/nn.hpp"
#include "volnet/tensor.hpp"

namespace volnet {

struct StaleCacheError : std::runtime_error {
    explicit StaleCacheError(const std::string& msg) : std::runtime_error(msg) {}
};

// Per-channel descriptors: spatial mean and max of each channel. The max
// argmax (flat index) is kept for the backward pass.
template <class T>
struct ChannelDescriptors {
    TensorT<T> avg;  // [N,C]
    TensorT<T> max;  // [N,C]
    std::vector<size_t> argmax;
};

template <class T>
ChannelDescriptors<T> channel_descriptors(const TensorT<T>& m) {
    if (m.ndim() != 5) throw ShapeError("channel_descriptors input must be 5-D, got " + m.shape_str());
    const size_t N = m.dim(0), C = m.dim(1);
    const size_t V = m.dim(2) * m.dim(3) * m.dim(4);
    ChannelDescriptors<T> d;
    d.avg = TensorT<T>({N, C});
    d.max = TensorT<T>({N, C});
    d.argmax.resize(N * C);
    for (size_t nc = 0; nc < N * C; ++nc) {
        const T* p = m.data() + nc * V;
        T s = 0, best = p[0];
        size_t bi = 0;
        for (size_t i = 0; i < V; ++i) {
            s += p[i];
            if (p[i] > best) {
                best = p[i];
                bi = i;
            }
        }
        d.avg[nc] = s / static_cast<T>(V);
        d.max[nc] = best;
        d.argmax[nc] = nc * V + bi;
    }
    return d;
}

// Shared two-layer MLP (w1, relu, w2), no biases; the two descriptor paths
// are summed before the sigmoid.
template <class T>
struct AttentionCache {
    TensorT<T> input;        // M
    TensorT<T> weights;      // sigmoid output [N,C]
    ChannelDescriptors<T> desc;
    TensorT<T> hidden_avg;   // avg . w1 (pre-relu)
    TensorT<T> hidden_max;   // max . w1 (pre-relu)
};

template <class T>
struct AttentionOutput {
    TensorT<T> attended;
    TensorT<T> weights;  // [N,C], strictly in (0,1)
    AttentionCache<T> cache;
};

template <class T>
AttentionOutput<T> attention_forward(const TensorT<T>& m, const TensorT<T>& w1,
                                     const TensorT<T>& w2) {
    const size_t C = m.dim(1);
    detail::check_axis(w1.dim(0), C, "attention w1", "C");
    detail::check_axis(w2.dim(1), C, "attention w2", "C");
    detail::check_axis(w2.dim(0), w1.dim(1), "attention w2", "C/r");

    AttentionOutput<T> out;
    out.cache.input = m;
    out.cache.desc = channel_descriptors(m);
    out.cache.hidden_avg = matmul(out.cache.desc.avg, w1);
    out.cache.hidden_max = matmul(out.cache.desc.max, w1);

    TensorT<T> s = add(matmul(relu(out.cache.hidden_avg), w2),
                       matmul(relu(out.cache.hidden_max), w2));
    out.weights = TensorT<T>(s.shape());
    const T hi = std::nextafter(T(1), T(0));
    const T lo = std::nextafter(T(0), T(1));
    for (size_t i = 0; i < s.size(); ++i) {
        // sigmoid saturates to exactly 0/1 for large |s|; the weights are
        // contractually inside the open interval
        const T w = T(1) / (T(1) + std::exp(-s[i]));
        out.weights[i] = std::min(std::max(w, lo), hi);
    }
    out.cache.weights = out.weights;
    out.attended = channel_scale(m, out.weights);
    return out;
}

template <class T>
struct AttentionGrads {
    TensorT<T> grad_input;  // grad w.r.t. M
    TensorT<T> grad_w1;
    TensorT<T> grad_w2;
};

template <class T>
AttentionGrads<T> attention_backward(const AttentionCache<T>& cache, const TensorT<T>& w1,
                                     const TensorT<T>& w2, const TensorT<T>& grad_attended) {
    const TensorT<T>& m = cache.input;
    if (!grad_attended.same_shape(m)) {
        throw StaleCacheError("attention_backward grad shape " + grad_attended.shape_str() +
                              " does not match cached input " + m.shape_str());
    }
    const size_t N = m.dim(0), C = m.dim(1);
    const size_t V = m.dim(2) * m.dim(3) * m.dim(4);

    AttentionGrads<T> g;
    g.grad_input = TensorT<T>(m.shape());

    // product rule through attended = weights (.) M
    TensorT<T> grad_weights({N, C});
    for (size_t nc = 0; nc < N * C; ++nc) {
        const T w = cache.weights[nc];
        const T* mp = m.data() + nc * V;
        const T* gp = grad_attended.data() + nc * V;
        T* gip = g.grad_input.data() + nc * V;
        T acc = 0;
        for (size_t i = 0; i < V; ++i) {
            gip[i] = w * gp[i];
            acc += gp[i] * mp[i];
        }
        grad_weights[nc] = acc;
    }

    // sigmoid
    TensorT<T> grad_s({N, C});
    for (size_t i = 0; i < grad_s.size(); ++i) {
        const T w = cache.weights[i];
        grad_s[i] = grad_weights[i] * w * (T(1) - w);
    }

    // the two MLP paths share w1 and w2
    TensorT<T> relu_avg = relu(cache.hidden_avg);
    TensorT<T> relu_max = relu(cache.hidden_max);
    auto [g_relu_avg, g_w2_a] = matmul_backward(relu_avg, w2, grad_s);
    auto [g_relu_max, g_w2_m] = matmul_backward(relu_max, w2, grad_s);
    g.grad_w2 = add(g_w2_a, g_w2_m);

    TensorT<T> g_hidden_avg = relu_backward(cache.hidden_avg, g_relu_avg);
    TensorT<T> g_hidden_max = relu_backward(cache.hidden_max, g_relu_max);
    auto [g_avg, g_w1_a] = matmul_backward(cache.desc.avg, w1, g_hidden_avg);
    auto [g_max, g_w1_m] = matmul_backward(cache.desc.max, w1, g_hidden_max);
    g.grad_w1 = add(g_w1_a, g_w1_m);

    // descriptor paths back into M: avg spreads uniformly, max routes to the
    // recorded argmax voxel
    for (size_t nc = 0; nc < N * C; ++nc) {
        const T ga = g_avg[nc] / static_cast<T>(V);
        T* gip = g.grad_input.data() + nc * V;
        for (size_t i = 0; i < V; ++i) gip[i] += ga;
        g.grad_input[cache.desc.argmax[nc]] += g_max[nc];
    }
    return g;
}

}  // namespace volnet

#endif
