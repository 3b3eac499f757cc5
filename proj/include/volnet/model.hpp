#ifndef VOLNET_MODEL_HPP
#define VOLNET_MODEL_HPP

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "volnet/attention.hpp"
#include "volnet/nn.hpp"
#include "volnet/rng.hpp"
#include "volnet/tensor.hpp"

namespace volnet {

struct InvalidConfigError : std::runtime_error {
    explicit InvalidConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct InferenceTraceError : std::runtime_error {
    explicit InferenceTraceError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ModelConfig {
    std::vector<size_t> stage_channels{64, 128, 256, 512};
    size_t blocks_per_stage = 2;
    size_t num_classes = 2;
    size_t reduction = 8;  // attention MLP bottleneck divisor

    size_t fused_width() const {
        size_t w = 0;
        for (size_t c : stage_channels) w += c;
        return w;
    }

    void validate() const {
        if (stage_channels.empty()) throw InvalidConfigError("stage_channels must be non-empty");
        if (blocks_per_stage < 1) throw InvalidConfigError("blocks_per_stage must be >= 1");
        if (num_classes < 2) throw InvalidConfigError("num_classes must be >= 2");
        if (reduction < 1) throw InvalidConfigError("reduction must be >= 1");
        for (size_t c : stage_channels) {
            if (c % reduction != 0) {
                throw InvalidConfigError("stage channel count " + std::to_string(c) +
                                         " is not divisible by reduction " +
                                         std::to_string(reduction));
            }
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

// Named parameter collection. Construction order is fixed so that seeded
// initialization and checkpoints are stable.
template <class T>
struct ModelParamsT {
    ModelConfig config;
    std::vector<ParamTensorT<T>> params;
    std::unordered_map<std::string, size_t> index;

    ParamTensorT<T>& add(const std::string& name, TensorT<T> value, bool trainable) {
        if (index.count(name)) throw InvalidConfigError("duplicate parameter name: " + name);
        index.emplace(name, params.size());
        params.emplace_back(name, std::move(value), trainable);
        return params.back();
    }

    ParamTensorT<T>& at(const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw InvalidConfigError("unknown parameter: " + name);
        return params[it->second];
    }
    const ParamTensorT<T>& at(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw InvalidConfigError("unknown parameter: " + name);
        return params[it->second];
    }
    bool has(const std::string& name) const { return index.count(name) != 0; }

    void zero_grads() {
        for (auto& p : params) p.zero_grad();
    }

    size_t total_values() const {
        size_t n = 0;
        for (const auto& p : params) n += p.value.size();
        return n;
    }

    template <class U>
    ModelParamsT<U> cast() const {
        ModelParamsT<U> out;
        out.config = config;
        out.index = index;
        out.params.reserve(params.size());
        for (const auto& p : params) {
            ParamTensorT<U> q(p.name, p.value.template cast<U>(), p.trainable);
            out.params.push_back(std::move(q));
        }
        return out;
    }
};

using ModelParams = ModelParamsT<float>;

namespace detail {

template <class T>
void add_bn_params(ModelParamsT<T>& m, const std::string& prefix, size_t channels) {
    m.add(prefix + ".gamma", TensorT<T>({channels}, T(1)), true);
    m.add(prefix + ".beta", TensorT<T>({channels}, T(0)), true);
    m.add(prefix + ".running_mean", TensorT<T>({channels}, T(0)), false);
    m.add(prefix + ".running_var", TensorT<T>({channels}, T(1)), false);
}

template <class T>
BnRefs<T> bn_refs(ModelParamsT<T>& m, const std::string& prefix) {
    BnRefs<T> bn;
    bn.gamma = &m.at(prefix + ".gamma");
    bn.beta = &m.at(prefix + ".beta");
    bn.running_mean = &m.at(prefix + ".running_mean");
    bn.running_var = &m.at(prefix + ".running_var");
    return bn;
}

template <class T>
BlockRefs<T> block_refs(ModelParamsT<T>& m, const std::string& prefix, bool downsample) {
    BlockRefs<T> b;
    b.conv1_w = &m.at(prefix + ".conv1.weight");
    b.bn1 = bn_refs(m, prefix + ".bn1");
    b.conv2_w = &m.at(prefix + ".conv2.weight");
    b.bn2 = bn_refs(m, prefix + ".bn2");
    b.stride = downsample ? 2 : 1;
    if (m.has(prefix + ".shortcut.conv.weight")) {
        b.shortcut_w = &m.at(prefix + ".shortcut.conv.weight");
        b.shortcut_bn = bn_refs(m, prefix + ".shortcut.bn");
    }
    return b;
}

inline bool block_downsamples(size_t stage, size_t block) { return stage > 0 && block == 0; }

}  // namespace detail

// Stem: conv 3x3x3 stride 2 (1 -> C0), BN, relu, maxpool 3x3x3 stride 2.
// Stage s has blocks_per_stage basic blocks; stages 2..4 downsample in their
// first block. One attention tap per stage output, off the main path.
template <class T>
ModelParamsT<T> build_model_t(const ModelConfig& config, uint64_t seed) {
    config.validate();
    ModelParamsT<T> m;
    m.config = config;
    size_t counter = 0;
    auto conv_init = [&](const std::vector<size_t>& shape, size_t fan_in) {
        return he_init<T>(shape, fan_in, CounterRng::mix(seed, counter++));
    };

    const size_t c0 = config.stage_channels[0];
    m.add("stem.conv.weight", conv_init({c0, 1, 3, 3, 3}, 1 * 27), true);
    detail::add_bn_params(m, "stem.bn", c0);

    size_t in_c = c0;
    for (size_t s = 0; s < config.stage_channels.size(); ++s) {
        const size_t out_c = config.stage_channels[s];
        for (size_t b = 0; b < config.blocks_per_stage; ++b) {
            const std::string prefix =
                "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
            const size_t block_in = (b == 0) ? in_c : out_c;
            m.add(prefix + ".conv1.weight",
                  conv_init({out_c, block_in, 3, 3, 3}, block_in * 27), true);
            detail::add_bn_params(m, prefix + ".bn1", out_c);
            m.add(prefix + ".conv2.weight",
                  conv_init({out_c, out_c, 3, 3, 3}, out_c * 27), true);
            detail::add_bn_params(m, prefix + ".bn2", out_c);
            const bool needs_shortcut =
                (b == 0) && (block_in != out_c || detail::block_downsamples(s, b));
            if (needs_shortcut) {
                m.add(prefix + ".shortcut.conv.weight",
                      conv_init({out_c, block_in, 1, 1, 1}, block_in), true);
                detail::add_bn_params(m, prefix + ".shortcut.bn", out_c);
            }
        }
        const size_t hidden = out_c / config.reduction;
        m.add("attn" + std::to_string(s + 1) + ".w1", conv_init({out_c, hidden}, out_c), true);
        m.add("attn" + std::to_string(s + 1) + ".w2", conv_init({hidden, out_c}, hidden), true);
        in_c = out_c;
    }

    const size_t fused = config.fused_width();
    m.add("fc.weight", conv_init({fused, config.num_classes}, fused), true);
    m.add("fc.bias", TensorT<T>({config.num_classes}, T(0)), true);
    return m;
}

inline ModelParams build_model(const ModelConfig& config, uint64_t seed) {
    return build_model_t<float>(config, seed);
}

template <class T>
TensorT<T> fuse_features(const std::vector<TensorT<T>>& gaps) {
    if (gaps.empty()) throw ShapeError("fuse_features: no inputs");
    const size_t N = gaps[0].dim(0);
    size_t total = 0;
    for (const auto& g : gaps) {
        if (g.ndim() != 2 || g.dim(0) != N) {
            throw ShapeError("fuse_features: expected [N,C] inputs with matching N");
        }
        total += g.dim(1);
    }
    TensorT<T> fused({N, total});
    for (size_t n = 0; n < N; ++n) {
        size_t off = 0;
        for (const auto& g : gaps) {
            const size_t c = g.dim(1);
            for (size_t i = 0; i < c; ++i) fused[n * total + off + i] = g[n * c + i];
            off += c;
        }
    }
    return fused;
}

template <class T>
struct ForwardTraceT {
    bool training = false;
    TensorT<T> input;
    BnCache<T> stem_bn;
    TensorT<T> stem_relu_in;  // stem BN output
    MaxPoolResult<T> stem_pool;
    std::vector<std::vector<BlockCache<T>>> block_caches;
    std::vector<TensorT<T>> stage_outputs;  // raw main-path activations
    std::vector<AttentionCache<T>> attn_caches;
    std::vector<TensorT<T>> attended_gaps;  // [N,C_s] per stage
    TensorT<T> fused;
    TensorT<T> logits;
    TensorT<T> probs;
    // filled by model_backward: d(objective)/d(raw stage output), per stage
    std::vector<TensorT<T>> stage_grads;
};

using ForwardTrace = ForwardTraceT<float>;

template <class T>
ForwardTraceT<T> model_forward(ModelParamsT<T>& m, const TensorT<T>& input, bool training) {
    if (input.ndim() != 5) throw ShapeError("model input must be 5-D N,C,D,H,W, got " + input.shape_str());
    detail::check_axis(input.dim(1), 1, "model input", "channels");

    ForwardTraceT<T> tr;
    tr.training = training;
    tr.input = input;

    ConvSpec stem_spec;
    stem_spec.kernel = {3, 3, 3};
    stem_spec.stride = {2, 2, 2};
    stem_spec.padding = {1, 1, 1};
    TensorT<T> x;
    try {
        x = conv3d_forward(input, m.at("stem.conv.weight").value, TensorT<T>(), stem_spec);
        auto bn = detail::bn_refs(m, "stem.bn");
        auto [bn_out, bn_cache] = batchnorm3d_forward(x, bn, training);
        tr.stem_bn = std::move(bn_cache);
        tr.stem_relu_in = bn_out;
        tr.stem_pool = maxpool3d(relu(bn_out), {3, 3, 3}, {2, 2, 2});
        x = tr.stem_pool.output;
    } catch (const DegenerateOutputError& e) {
        throw DegenerateOutputError(std::string("stem: ") + e.what());
    }

    const size_t S = m.config.stage_channels.size();
    tr.block_caches.resize(S);
    for (size_t s = 0; s < S; ++s) {
        for (size_t b = 0; b < m.config.blocks_per_stage; ++b) {
            const std::string prefix =
                "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
            auto refs = detail::block_refs(m, prefix, detail::block_downsamples(s, b));
            try {
                auto [out, cache] = residual_block_forward(x, refs, training);
                tr.block_caches[s].push_back(std::move(cache));
                x = std::move(out);
            } catch (const DegenerateOutputError& e) {
                throw DegenerateOutputError("stage " + std::to_string(s + 1) + ": " + e.what());
            }
        }
        tr.stage_outputs.push_back(x);

        auto att = attention_forward(x, m.at("attn" + std::to_string(s + 1) + ".w1").value,
                                     m.at("attn" + std::to_string(s + 1) + ".w2").value);
        tr.attn_caches.push_back(std::move(att.cache));
        tr.attended_gaps.push_back(global_avg_pool3d(att.attended));
    }

    tr.fused = fuse_features(tr.attended_gaps);
    detail::check_axis(tr.fused.dim(1), m.config.fused_width(), "fused features", "width");
    tr.logits = linear_forward(tr.fused, m.at("fc.weight").value, m.at("fc.bias").value);

    const size_t N = tr.logits.dim(0), K = tr.logits.dim(1);
    tr.probs = TensorT<T>({N, K});
    for (size_t n = 0; n < N; ++n) {
        const T* row = tr.logits.data() + n * K;
        T mx = row[0];
        for (size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double denom = 0;
        for (size_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(row[k] - mx));
        for (size_t k = 0; k < K; ++k) {
            tr.probs[n * K + k] =
                static_cast<T>(std::exp(static_cast<double>(row[k] - mx)) / denom);
        }
    }
    return tr;
}

struct BackwardOptions {
    bool accumulate_param_grads = true;
    bool capture_stage_grads = false;
    bool allow_inference_trace = false;  // used by Grad-CAM
    bool detach_attention_taps = false;  // zero the taps' upstream gradient
};

template <class T>
TensorT<T> model_backward(ModelParamsT<T>& m, ForwardTraceT<T>& tr,
                          const TensorT<T>& grad_logits,
                          const BackwardOptions& opts = {}) {
    if (!tr.training && !opts.allow_inference_trace) {
        throw InferenceTraceError("model_backward requires a training-mode trace");
    }
    if (!grad_logits.same_shape(tr.logits)) {
        throw ShapeError("grad_logits shape " + grad_logits.shape_str() +
                         " does not match logits " + tr.logits.shape_str());
    }
    const bool acc = opts.accumulate_param_grads;

    auto fc = linear_backward(tr.fused, m.at("fc.weight").value, grad_logits);
    if (acc) {
        auto& fw = m.at("fc.weight");
        auto& fb = m.at("fc.bias");
        for (size_t i = 0; i < fw.grad.size(); ++i) fw.grad[i] += fc.grad_weight[i];
        for (size_t i = 0; i < fb.grad.size(); ++i) fb.grad[i] += fc.grad_bias[i];
    }

    const size_t S = m.config.stage_channels.size();
    const size_t N = tr.fused.dim(0);

    // tap gradients: slice fused grad per stage, spread over GAP, then back
    // through attention into each raw stage output
    std::vector<TensorT<T>> tap_grads(S);
    size_t off = 0;
    for (size_t s = 0; s < S; ++s) {
        const size_t c = m.config.stage_channels[s];
        TensorT<T> g_gap({N, c});
        const size_t total = tr.fused.dim(1);
        for (size_t n = 0; n < N; ++n) {
            for (size_t i = 0; i < c; ++i) g_gap[n * c + i] = fc.grad_input[n * total + off + i];
        }
        off += c;

        TensorT<T> g_attended =
            global_avg_pool3d_backward(g_gap, tr.stage_outputs[s].shape());
        auto ag = attention_backward(tr.attn_caches[s],
                                     m.at("attn" + std::to_string(s + 1) + ".w1").value,
                                     m.at("attn" + std::to_string(s + 1) + ".w2").value,
                                     g_attended);
        if (acc) {
            auto& w1 = m.at("attn" + std::to_string(s + 1) + ".w1");
            auto& w2 = m.at("attn" + std::to_string(s + 1) + ".w2");
            for (size_t i = 0; i < w1.grad.size(); ++i) w1.grad[i] += ag.grad_w1[i];
            for (size_t i = 0; i < w2.grad.size(); ++i) w2.grad[i] += ag.grad_w2[i];
        }
        tap_grads[s] = std::move(ag.grad_input);
    }

    if (opts.capture_stage_grads) tr.stage_grads.assign(S, TensorT<T>());

    // trunk, last stage first; each stage receives its tap gradient plus the
    // gradient flowing back from later stages
    TensorT<T> g(tr.stage_outputs[S - 1].shape());
    for (size_t si = S; si-- > 0;) {
        if (!opts.detach_attention_taps) {
            for (size_t i = 0; i < g.size(); ++i) g[i] += tap_grads[si][i];
        }
        if (opts.capture_stage_grads) tr.stage_grads[si] = g;
        for (size_t b = m.config.blocks_per_stage; b-- > 0;) {
            const std::string prefix =
                "stage" + std::to_string(si + 1) + ".block" + std::to_string(b);
            auto refs = detail::block_refs(m, prefix, detail::block_downsamples(si, b));
            g = residual_block_backward(tr.block_caches[si][b], refs, g, acc);
        }
        if (si > 0 && !g.same_shape(tr.stage_outputs[si - 1])) {
            throw ShapeError("stage gradient shape mismatch at stage " + std::to_string(si));
        }
    }

    // stem
    TensorT<T> g_pool = maxpool3d_backward(tr.stem_pool, g);
    TensorT<T> g_relu = relu_backward(tr.stem_relu_in, g_pool);
    auto bn = detail::bn_refs(m, "stem.bn");
    TensorT<T> g_bn = batchnorm3d_backward(tr.stem_bn, bn, g_relu, acc);
    ConvSpec stem_spec;
    stem_spec.kernel = {3, 3, 3};
    stem_spec.stride = {2, 2, 2};
    stem_spec.padding = {1, 1, 1};
    auto gc = conv3d_backward(tr.input, m.at("stem.conv.weight").value, stem_spec, g_bn);
    if (acc) {
        auto& sw = m.at("stem.conv.weight");
        for (size_t i = 0; i < sw.grad.size(); ++i) sw.grad[i] += gc.grad_weight[i];
    }
    return std::move(gc.grad_input);
}

// name -> shape manifest, one line per parameter
template <class T>
std::string parameter_manifest(const ModelParamsT<T>& m) {
    std::ostringstream os;
    for (const auto& p : m.params) {
        os << p.name << " " << p.value.shape_str() << " " << p.value.size()
           << (p.trainable ? "" : " (fixed)") << "\n";
    }
    os << "tensors " << m.params.size() << "\n";
    os << "values " << m.total_values() << "\n";
    os << "fused_width " << m.config.fused_width() << "\n";
    return os.str();
}

}  // namespace volnet

#endif
