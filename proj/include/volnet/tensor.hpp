#ifndef VOLNET_TENSOR_HPP
#define VOLNET_TENSOR_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace volnet {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DegenerateOutputError : std::runtime_error {
    explicit DegenerateOutputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense row-major tensor (last axis fastest). Layout for activations is
// fixed as N,C,D,H,W across the whole project.
template <class T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(std::vector<size_t> shape, T fill = T(0))
        : shape_(std::move(shape)) {
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (shape_[i] == 0) {
                throw ShapeError("tensor axis " + std::to_string(i) + " has size 0");
            }
        }
        data_.assign(numel_of(shape_), fill);
    }

    static TensorT from_data(std::vector<size_t> shape, std::vector<T> data) {
        TensorT t;
        if (numel_of(shape) != data.size()) {
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape product " +
                             std::to_string(numel_of(shape)));
        }
        t.shape_ = std::move(shape);
        t.data_ = std::move(data);
        return t;
    }

    const std::vector<size_t>& shape() const { return shape_; }
    size_t ndim() const { return shape_.size(); }
    size_t size() const { return data_.size(); }
    size_t dim(size_t i) const { return shape_.at(i); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](size_t i) { return data_[i]; }
    const T& operator[](size_t i) const { return data_[i]; }

    template <class U>
    TensorT<U> cast() const {
        std::vector<U> out(data_.size());
        for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return TensorT<U>::from_data(shape_, std::move(out));
    }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) os << ",";
            os << shape_[i];
        }
        os << "]";
        return os.str();
    }

    static size_t numel_of(const std::vector<size_t>& shape) {
        size_t n = 1;
        for (size_t d : shape) n *= d;
        return n;
    }

private:
    std::vector<size_t> shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;

struct ConvSpec {
    std::array<size_t, 3> kernel{3, 3, 3};   // kd, kh, kw
    std::array<size_t, 3> stride{1, 1, 1};   // sd, sh, sw
    std::array<size_t, 3> padding{0, 0, 0};  // pd, ph, pw

    size_t out_dim(size_t in, int axis) const {
        size_t k = kernel[axis], s = stride[axis], p = padding[axis];
        if (in + 2 * p < k) {
            throw DegenerateOutputError("convolution output axis " + std::to_string(axis) +
                                        " would be empty (in=" + std::to_string(in) +
                                        ", kernel=" + std::to_string(k) +
                                        ", pad=" + std::to_string(p) + ")");
        }
        return (in + 2 * p - k) / s + 1;
    }
};

namespace detail {

inline void check_axis(size_t got, size_t want, const char* what, const char* axis) {
    if (got != want) {
        throw ShapeError(std::string(what) + ": axis " + axis + " is " +
                         std::to_string(got) + ", expected " + std::to_string(want));
    }
}

// Valid output index range [lo, hi) for which in = o*stride - pad + k lies
// inside [0, extent).
inline void valid_range(size_t out_extent, size_t in_extent, size_t stride,
                        size_t pad, size_t k, size_t& lo, size_t& hi) {
    ptrdiff_t off = static_cast<ptrdiff_t>(k) - static_cast<ptrdiff_t>(pad);
    ptrdiff_t l = 0;
    if (off < 0) l = (-off + static_cast<ptrdiff_t>(stride) - 1) / static_cast<ptrdiff_t>(stride);
    // Integer division truncates toward zero, so a negative numerator (window
    // entirely past the input) must be handled as an empty range explicitly.
    ptrdiff_t top = static_cast<ptrdiff_t>(in_extent) - 1 - off;
    ptrdiff_t h = top < 0 ? 0 : top / static_cast<ptrdiff_t>(stride) + 1;
    if (h > static_cast<ptrdiff_t>(out_extent)) h = static_cast<ptrdiff_t>(out_extent);
    if (h < l) h = l;
    lo = static_cast<size_t>(l);
    hi = static_cast<size_t>(h);
}

}  // namespace detail

template <class T>
TensorT<T> conv3d_forward(const TensorT<T>& input, const TensorT<T>& weight,
                          const TensorT<T>& bias, const ConvSpec& spec) {
    if (input.ndim() != 5) throw ShapeError("conv3d input must be 5-D, got " + input.shape_str());
    if (weight.ndim() != 5) throw ShapeError("conv3d weight must be 5-D, got " + weight.shape_str());
    const size_t N = input.dim(0), Cin = input.dim(1);
    const size_t D = input.dim(2), H = input.dim(3), W = input.dim(4);
    const size_t Cout = weight.dim(0);
    detail::check_axis(weight.dim(1), Cin, "conv3d weight", "in_channels");
    detail::check_axis(weight.dim(2), spec.kernel[0], "conv3d weight", "kd");
    detail::check_axis(weight.dim(3), spec.kernel[1], "conv3d weight", "kh");
    detail::check_axis(weight.dim(4), spec.kernel[2], "conv3d weight", "kw");
    if (bias.size() != 0) detail::check_axis(bias.dim(0), Cout, "conv3d bias", "out_channels");

    const size_t Do = spec.out_dim(D, 0), Ho = spec.out_dim(H, 1), Wo = spec.out_dim(W, 2);
    const size_t sd = spec.stride[0], sh = spec.stride[1], sw = spec.stride[2];
    const size_t pd = spec.padding[0], ph = spec.padding[1], pw = spec.padding[2];
    const size_t kd = spec.kernel[0], kh = spec.kernel[1], kw = spec.kernel[2];

    TensorT<T> out({N, Cout, Do, Ho, Wo});
    const T* in = input.data();
    const T* wt = weight.data();
    T* op = out.data();

    for (size_t n = 0; n < N; ++n) {
        for (size_t co = 0; co < Cout; ++co) {
            T* out_nc = op + ((n * Cout + co) * Do) * Ho * Wo;
            if (bias.size() != 0) {
                const T b = bias[co];
                for (size_t i = 0; i < Do * Ho * Wo; ++i) out_nc[i] = b;
            }
            for (size_t ci = 0; ci < Cin; ++ci) {
                const T* in_nc = in + ((n * Cin + ci) * D) * H * W;
                const T* w_cc = wt + ((co * Cin + ci) * kd) * kh * kw;
                for (size_t kz = 0; kz < kd; ++kz) {
                    size_t zlo, zhi;
                    detail::valid_range(Do, D, sd, pd, kz, zlo, zhi);
                    for (size_t ky = 0; ky < kh; ++ky) {
                        size_t ylo, yhi;
                        detail::valid_range(Ho, H, sh, ph, ky, ylo, yhi);
                        for (size_t kx = 0; kx < kw; ++kx) {
                            size_t xlo, xhi;
                            detail::valid_range(Wo, W, sw, pw, kx, xlo, xhi);
                            const T wv = w_cc[(kz * kh + ky) * kw + kx];
                            if (wv == T(0)) continue;
                            for (size_t oz = zlo; oz < zhi; ++oz) {
                                const size_t iz = oz * sd - pd + kz;
                                for (size_t oy = ylo; oy < yhi; ++oy) {
                                    const size_t iy = oy * sh - ph + ky;
                                    const T* irow = in_nc + (iz * H + iy) * W - pw + kx;
                                    T* orow = out_nc + (oz * Ho + oy) * Wo;
                                    for (size_t ox = xlo; ox < xhi; ++ox) {
                                        orow[ox] += wv * irow[ox * sw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <class T>
struct Conv3dGrads {
    TensorT<T> grad_input;
    TensorT<T> grad_weight;
    TensorT<T> grad_bias;
};

template <class T>
Conv3dGrads<T> conv3d_backward(const TensorT<T>& input, const TensorT<T>& weight,
                               const ConvSpec& spec, const TensorT<T>& grad_out) {
    const size_t N = input.dim(0), Cin = input.dim(1);
    const size_t D = input.dim(2), H = input.dim(3), W = input.dim(4);
    const size_t Cout = weight.dim(0);
    const size_t Do = spec.out_dim(D, 0), Ho = spec.out_dim(H, 1), Wo = spec.out_dim(W, 2);
    detail::check_axis(grad_out.dim(0), N, "conv3d grad_out", "N");
    detail::check_axis(grad_out.dim(1), Cout, "conv3d grad_out", "C");
    detail::check_axis(grad_out.dim(2), Do, "conv3d grad_out", "D");
    detail::check_axis(grad_out.dim(3), Ho, "conv3d grad_out", "H");
    detail::check_axis(grad_out.dim(4), Wo, "conv3d grad_out", "W");

    const size_t sd = spec.stride[0], sh = spec.stride[1], sw = spec.stride[2];
    const size_t pd = spec.padding[0], ph = spec.padding[1], pw = spec.padding[2];
    const size_t kd = spec.kernel[0], kh = spec.kernel[1], kw = spec.kernel[2];

    Conv3dGrads<T> g;
    g.grad_input = TensorT<T>(input.shape());
    g.grad_weight = TensorT<T>(weight.shape());
    g.grad_bias = TensorT<T>({Cout});

    const T* in = input.data();
    const T* wt = weight.data();
    const T* go = grad_out.data();
    T* gi = g.grad_input.data();
    T* gw = g.grad_weight.data();

    for (size_t n = 0; n < N; ++n) {
        for (size_t co = 0; co < Cout; ++co) {
            const T* go_nc = go + ((n * Cout + co) * Do) * Ho * Wo;
            T bsum = 0;
            for (size_t i = 0; i < Do * Ho * Wo; ++i) bsum += go_nc[i];
            g.grad_bias[co] += bsum;
            for (size_t ci = 0; ci < Cin; ++ci) {
                const T* in_nc = in + ((n * Cin + ci) * D) * H * W;
                T* gi_nc = gi + ((n * Cin + ci) * D) * H * W;
                const T* w_cc = wt + ((co * Cin + ci) * kd) * kh * kw;
                T* gw_cc = gw + ((co * Cin + ci) * kd) * kh * kw;
                for (size_t kz = 0; kz < kd; ++kz) {
                    size_t zlo, zhi;
                    detail::valid_range(Do, D, sd, pd, kz, zlo, zhi);
                    for (size_t ky = 0; ky < kh; ++ky) {
                        size_t ylo, yhi;
                        detail::valid_range(Ho, H, sh, ph, ky, ylo, yhi);
                        for (size_t kx = 0; kx < kw; ++kx) {
                            size_t xlo, xhi;
                            detail::valid_range(Wo, W, sw, pw, kx, xlo, xhi);
                            const T wv = w_cc[(kz * kh + ky) * kw + kx];
                            T wacc = 0;
                            for (size_t oz = zlo; oz < zhi; ++oz) {
                                const size_t iz = oz * sd - pd + kz;
                                for (size_t oy = ylo; oy < yhi; ++oy) {
                                    const size_t iy = oy * sh - ph + ky;
                                    const T* irow = in_nc + (iz * H + iy) * W - pw + kx;
                                    T* girow = gi_nc + (iz * H + iy) * W - pw + kx;
                                    const T* gorow = go_nc + (oz * Ho + oy) * Wo;
                                    for (size_t ox = xlo; ox < xhi; ++ox) {
                                        const T gv = gorow[ox];
                                        wacc += gv * irow[ox * sw];
                                        girow[ox * sw] += wv * gv;
                                    }
                                }
                            }
                            gw_cc[(kz * kh + ky) * kw + kx] += wacc;
                        }
                    }
                }
            }
        }
    }
    return g;
}

template <class T>
struct MaxPoolResult {
    TensorT<T> output;
    std::vector<size_t> argmax;  // flat index into the input, one per output element
    std::vector<size_t> input_shape;
};

template <class T>
MaxPoolResult<T> maxpool3d(const TensorT<T>& input, std::array<size_t, 3> window,
                           std::array<size_t, 3> stride) {
    if (input.ndim() != 5) throw ShapeError("maxpool3d input must be 5-D, got " + input.shape_str());
    const size_t N = input.dim(0), C = input.dim(1);
    const size_t D = input.dim(2), H = input.dim(3), W = input.dim(4);
    const size_t ext[3] = {D, H, W};
    size_t out_ext[3];
    for (int a = 0; a < 3; ++a) {
        if (ext[a] < window[a]) {
            throw DegenerateOutputError("maxpool window does not fit axis " + std::to_string(a));
        }
        out_ext[a] = (ext[a] - window[a]) / stride[a] + 1;
    }
    const size_t Do = out_ext[0], Ho = out_ext[1], Wo = out_ext[2];

    MaxPoolResult<T> r;
    r.output = TensorT<T>({N, C, Do, Ho, Wo});
    r.argmax.assign(r.output.size(), 0);
    r.input_shape = input.shape();

    const T* in = input.data();
    size_t oi = 0;
    for (size_t n = 0; n < N; ++n) {
        for (size_t c = 0; c < C; ++c) {
            const size_t base = ((n * C + c) * D) * H * W;
            for (size_t oz = 0; oz < Do; ++oz) {
                for (size_t oy = 0; oy < Ho; ++oy) {
                    for (size_t ox = 0; ox < Wo; ++ox, ++oi) {
                        T best = -std::numeric_limits<T>::infinity();
                        size_t besti = 0;
                        for (size_t a = 0; a < window[0]; ++a) {
                            const size_t iz = oz * stride[0] + a;
                            for (size_t b = 0; b < window[1]; ++b) {
                                const size_t iy = oy * stride[1] + b;
                                for (size_t cwin = 0; cwin < window[2]; ++cwin) {
                                    const size_t ix = ox * stride[2] + cwin;
                                    const size_t fi = base + (iz * H + iy) * W + ix;
                                    if (in[fi] > best) {  // first (lowest) flat index wins ties
                                        best = in[fi];
                                        besti = fi;
                                    }
                                }
                            }
                        }
                        r.output[oi] = best;
                        r.argmax[oi] = besti;
                    }
                }
            }
        }
    }
    return r;
}

template <class T>
TensorT<T> maxpool3d_backward(const MaxPoolResult<T>& pooled, const TensorT<T>& grad_out) {
    if (!grad_out.same_shape(pooled.output)) {
        throw ShapeError("maxpool3d_backward grad_out shape " + grad_out.shape_str() +
                         " does not match pooled output " + pooled.output.shape_str());
    }
    TensorT<T> gi(pooled.input_shape);
    for (size_t i = 0; i < grad_out.size(); ++i) {
        gi[pooled.argmax[i]] += grad_out[i];
    }
    return gi;
}

template <class T>
TensorT<T> global_avg_pool3d(const TensorT<T>& input) {
    if (input.ndim() != 5) throw ShapeError("global_avg_pool3d input must be 5-D, got " + input.shape_str());
    const size_t N = input.dim(0), C = input.dim(1);
    const size_t V = input.dim(2) * input.dim(3) * input.dim(4);
    TensorT<T> out({N, C});
    const T* in = input.data();
    for (size_t nc = 0; nc < N * C; ++nc) {
        T s = 0;
        const T* p = in + nc * V;
        for (size_t i = 0; i < V; ++i) s += p[i];
        out[nc] = s / static_cast<T>(V);
    }
    return out;
}

// Spreads grad [N,C] back uniformly over the spatial volume.
template <class T>
TensorT<T> global_avg_pool3d_backward(const TensorT<T>& grad_out,
                                      const std::vector<size_t>& input_shape) {
    TensorT<T> gi(input_shape);
    const size_t N = input_shape[0], C = input_shape[1];
    const size_t V = input_shape[2] * input_shape[3] * input_shape[4];
    T* p = gi.data();
    for (size_t nc = 0; nc < N * C; ++nc) {
        const T g = grad_out[nc] / static_cast<T>(V);
        for (size_t i = 0; i < V; ++i) p[nc * V + i] = g;
    }
    return gi;
}

template <class T>
TensorT<T> channel_scale(const TensorT<T>& input, const TensorT<T>& weights) {
    if (input.ndim() != 5) throw ShapeError("channel_scale input must be 5-D, got " + input.shape_str());
    detail::check_axis(weights.dim(0), input.dim(0), "channel_scale weights", "N");
    detail::check_axis(weights.dim(1), input.dim(1), "channel_scale weights", "C");
    const size_t NC = input.dim(0) * input.dim(1);
    const size_t V = input.dim(2) * input.dim(3) * input.dim(4);
    TensorT<T> out(input.shape());
    const T* in = input.data();
    T* op = out.data();
    for (size_t nc = 0; nc < NC; ++nc) {
        const T w = weights[nc];
        for (size_t i = 0; i < V; ++i) op[nc * V + i] = w * in[nc * V + i];
    }
    return out;
}

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2) {
        throw ShapeError("matmul expects 2-D operands, got " + a.shape_str() + " and " + b.shape_str());
    }
    detail::check_axis(b.dim(0), a.dim(1), "matmul", "inner");
    const size_t M = a.dim(0), K = a.dim(1), P = b.dim(1);
    TensorT<T> out({M, P});
    const T* ap = a.data();
    const T* bp = b.data();
    T* op = out.data();
    for (size_t i = 0; i < M; ++i) {
        for (size_t k = 0; k < K; ++k) {
            const T av = ap[i * K + k];
            if (av == T(0)) continue;
            const T* brow = bp + k * P;
            T* orow = op + i * P;
            for (size_t j = 0; j < P; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

template <class T>
std::pair<TensorT<T>, TensorT<T>> matmul_backward(const TensorT<T>& a, const TensorT<T>& b,
                                                  const TensorT<T>& grad_out) {
    const size_t M = a.dim(0), K = a.dim(1), P = b.dim(1);
    detail::check_axis(grad_out.dim(0), M, "matmul grad_out", "M");
    detail::check_axis(grad_out.dim(1), P, "matmul grad_out", "P");
    TensorT<T> ga({M, K});
    TensorT<T> gb({K, P});
    // ga = grad_out * b^T ; gb = a^T * grad_out
    for (size_t i = 0; i < M; ++i) {
        for (size_t j = 0; j < P; ++j) {
            const T g = grad_out[i * P + j];
            if (g == T(0)) continue;
            for (size_t k = 0; k < K; ++k) {
                ga[i * K + k] += g * b[k * P + j];
                gb[k * P + j] += a[i * K + k] * g;
            }
        }
    }
    return {std::move(ga), std::move(gb)};
}

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("add shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    }
    TensorT<T> out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("mul shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    }
    TensorT<T> out(a.shape());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
    TensorT<T> out(x.shape());
    for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    return out;
}

// Gradient at exactly 0 is defined as 0.
template <class T>
TensorT<T> relu_backward(const TensorT<T>& forward_input, const TensorT<T>& grad_out) {
    if (!forward_input.same_shape(grad_out)) {
        throw ShapeError("relu_backward shape mismatch: " + forward_input.shape_str() +
                         " vs " + grad_out.shape_str());
    }
    TensorT<T> gi(forward_input.shape());
    for (size_t i = 0; i < gi.size(); ++i) {
        gi[i] = forward_input[i] > T(0) ? grad_out[i] : T(0);
    }
    return gi;
}

}  // namespace volnet

#endif
