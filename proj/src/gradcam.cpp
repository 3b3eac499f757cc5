#include "volnet/gradcam.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "volnet/attention.hpp"
#include "volnet/data.hpp"

namespace volnet {

Tensor gradcam_weights(ModelParams& model, ForwardTrace& trace, size_t stage,
                       size_t target_class) {
    const size_t S = model.config.stage_channels.size();
    if (stage < 1 || stage > S) {
        throw InvalidStageError("stage " + std::to_string(stage) + " outside [1," +
                                std::to_string(S) + "]");
    }
    const size_t N = trace.logits.dim(0), K = trace.logits.dim(1);
    if (N != 1) throw ShapeError("gradcam_weights expects a single-sample trace");
    if (target_class >= K) {
        throw InvalidStageError("target class " + std::to_string(target_class) +
                                " outside [0," + std::to_string(K) + ")");
    }

    Tensor grad_logits({N, K});
    grad_logits[target_class] = 1.0f;
    BackwardOptions opts;
    opts.accumulate_param_grads = false;
    opts.capture_stage_grads = true;
    opts.allow_inference_trace = true;
    model_backward(model, trace, grad_logits, opts);

    const Tensor& g = trace.stage_grads[stage - 1];
    const size_t C = g.dim(1);
    const size_t V = g.dim(2) * g.dim(3) * g.dim(4);
    Tensor alpha({C});
    for (size_t c = 0; c < C; ++c) {
        double s = 0;
        const float* p = g.data() + c * V;
        for (size_t i = 0; i < V; ++i) s += p[i];
        alpha[c] = static_cast<float>(s / static_cast<double>(V));
    }
    return alpha;
}

Heatmap gradcam_map(const Tensor& stage_activations, const Tensor& alpha) {
    if (stage_activations.ndim() != 5 || stage_activations.dim(0) != 1) {
        throw ShapeError("gradcam_map expects [1,C,D,H,W] activations, got " +
                         stage_activations.shape_str());
    }
    const size_t C = stage_activations.dim(1);
    detail::check_axis(alpha.dim(0), C, "gradcam alpha", "C");
    const size_t D = stage_activations.dim(2), H = stage_activations.dim(3),
                 W = stage_activations.dim(4);
    const size_t V = D * H * W;

    Heatmap hm;
    hm.values = Tensor({D, H, W});
    for (size_t c = 0; c < C; ++c) {
        const float a = alpha[c];
        if (a == 0.0f) continue;
        const float* p = stage_activations.data() + c * V;
        for (size_t i = 0; i < V; ++i) hm.values[i] += a * p[i];
    }
    float mx = 0;
    for (size_t i = 0; i < V; ++i) {
        hm.values[i] = std::max(hm.values[i], 0.0f);
        mx = std::max(mx, hm.values[i]);
    }
    hm.pre_norm_max = mx;
    if (mx > 0) {
        for (size_t i = 0; i < V; ++i) hm.values[i] /= mx;
    }
    return hm;
}

Tensor trilinear_upsample(const Tensor& map, std::array<size_t, 3> target) {
    if (map.ndim() != 3) throw ShapeError("trilinear_upsample expects a 3-D map, got " + map.shape_str());
    const size_t d = map.dim(0), h = map.dim(1), w = map.dim(2);
    const size_t D = target[0], H = target[1], W = target[2];
    Tensor out({D, H, W});

    auto scale = [](size_t in, size_t outn) {
        return outn > 1 ? static_cast<double>(in - 1) / static_cast<double>(outn - 1) : 0.0;
    };
    const double sz = scale(d, D), sy = scale(h, H), sx = scale(w, W);

    size_t oi = 0;
    for (size_t z = 0; z < D; ++z) {
        const double fz = z * sz;
        const size_t z0 = std::min(static_cast<size_t>(fz), d - 1);
        const size_t z1 = std::min(z0 + 1, d - 1);
        const double tz = fz - static_cast<double>(z0);
        for (size_t y = 0; y < H; ++y) {
            const double fy = y * sy;
            const size_t y0 = std::min(static_cast<size_t>(fy), h - 1);
            const size_t y1 = std::min(y0 + 1, h - 1);
            const double ty = fy - static_cast<double>(y0);
            for (size_t x = 0; x < W; ++x, ++oi) {
                const double fx = x * sx;
                const size_t x0 = std::min(static_cast<size_t>(fx), w - 1);
                const size_t x1 = std::min(x0 + 1, w - 1);
                const double tx = fx - static_cast<double>(x0);
                auto at = [&](size_t a, size_t b, size_t c) {
                    return static_cast<double>(map[(a * h + b) * w + c]);
                };
                const double c00 = at(z0, y0, x0) * (1 - tx) + at(z0, y0, x1) * tx;
                const double c01 = at(z0, y1, x0) * (1 - tx) + at(z0, y1, x1) * tx;
                const double c10 = at(z1, y0, x0) * (1 - tx) + at(z1, y0, x1) * tx;
                const double c11 = at(z1, y1, x0) * (1 - tx) + at(z1, y1, x1) * tx;
                const double c0 = c00 * (1 - ty) + c01 * ty;
                const double c1 = c10 * (1 - ty) + c11 * ty;
                out[oi] = static_cast<float>(c0 * (1 - tz) + c1 * tz);
            }
        }
    }
    return out;
}

Heatmap compute_gradcam(ModelParams& model, const Tensor& volume, size_t stage,
                        size_t target_class, bool use_attended) {
    if (volume.ndim() != 3) throw ShapeError("compute_gradcam expects a 3-D volume, got " + volume.shape_str());
    Tensor input = Tensor::from_data({1, 1, volume.dim(0), volume.dim(1), volume.dim(2)},
                                     volume.vec());
    auto trace = model_forward(model, input, false);
    Tensor alpha = gradcam_weights(model, trace, stage, target_class);

    Heatmap hm;
    if (use_attended) {
        const auto& cache = trace.attn_caches[stage - 1];
        Tensor attended = channel_scale(cache.input, cache.weights);
        hm = gradcam_map(attended, alpha);
    } else {
        hm = gradcam_map(trace.stage_outputs[stage - 1], alpha);
    }
    hm.stage = stage;
    hm.target_class = target_class;
    hm.values = trilinear_upsample(hm.values, {volume.dim(0), volume.dim(1), volume.dim(2)});
    return hm;
}

namespace {

void write_pgm(const std::vector<unsigned char>& pixels, size_t rows, size_t cols,
               const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "P5\n" << cols << " " << rows << "\n255\n";
    f.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
    if (!f) throw IoError("failed writing " + path);
}

unsigned char to_byte(double v) {
    v = std::min(std::max(v, 0.0), 1.0);
    return static_cast<unsigned char>(std::lround(v * 255.0));
}

}  // namespace

void export_heatmap(const Heatmap& heatmap, const Tensor& input_volume,
                    const std::string& path_prefix) {
    if (!heatmap.values.same_shape(input_volume)) {
        throw ShapeError("heatmap shape " + heatmap.values.shape_str() +
                         " does not match input volume " + input_volume.shape_str());
    }
    write_raw(heatmap.values, path_prefix + ".vraw");

    const size_t D = input_volume.dim(0), H = input_volume.dim(1), W = input_volume.dim(2);
    float lo = input_volume[0], hi = input_volume[0];
    for (size_t i = 0; i < input_volume.size(); ++i) {
        lo = std::min(lo, input_volume[i]);
        hi = std::max(hi, input_volume[i]);
    }
    const double span = hi > lo ? static_cast<double>(hi - lo) : 1.0;
    auto norm_in = [&](size_t i) { return (input_volume[i] - lo) / span; };

    struct Slice {
        const char* name;
        size_t rows, cols;
    };
    const Slice slices[3] = {{"z", H, W}, {"y", D, W}, {"x", D, H}};
    for (int axis = 0; axis < 3; ++axis) {
        const auto& s = slices[axis];
        std::vector<unsigned char> heat(s.rows * s.cols), overlay(s.rows * s.cols);
        for (size_t r = 0; r < s.rows; ++r) {
            for (size_t c = 0; c < s.cols; ++c) {
                size_t idx;
                if (axis == 0) {
                    idx = ((D / 2) * H + r) * W + c;
                } else if (axis == 1) {
                    idx = (r * H + H / 2) * W + c;
                } else {
                    idx = (r * H + c) * W + W / 2;
                }
                const double hv = heatmap.values[idx];
                heat[r * s.cols + c] = to_byte(hv);
                overlay[r * s.cols + c] = to_byte(0.5 * norm_in(idx) + 0.5 * hv);
            }
        }
        write_pgm(heat, s.rows, s.cols, path_prefix + "_" + s.name + ".pgm");
        write_pgm(overlay, s.rows, s.cols, path_prefix + "_" + s.name + "_overlay.pgm");
    }
}

}  // namespace volnet
