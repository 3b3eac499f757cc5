#ifndef VOLNET_GRADCAM_HPP
#define VOLNET_GRADCAM_HPP

#include <string>

#include "volnet/model.hpp"
#include "volnet/tensor.hpp"

namespace volnet {

struct InvalidStageError : std::runtime_error {
    explicit InvalidStageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Heatmap {
    Tensor values;          // [D,H,W], in [0,1]
    size_t stage = 0;       // 1-based source stage
    size_t target_class = 0;
    float pre_norm_max = 0;  // raw map maximum before scaling
};

// alpha_k = spatial mean of d(logit_target)/d(stage activation channel k).
// The trace must come from a single-sample forward; param grads are left
// untouched.
Tensor gradcam_weights(ModelParams& model, ForwardTrace& trace, size_t stage,
                       size_t target_class);

// relu of the alpha-weighted channel sum, scaled so the peak is 1 (all zero
// when the raw map has no positive value)
Heatmap gradcam_map(const Tensor& stage_activations, const Tensor& alpha);

// align-corners trilinear interpolation
Tensor trilinear_upsample(const Tensor& map, std::array<size_t, 3> target);

// whole pipeline: forward, backward to the chosen stage, weight, upsample to
// the input resolution. use_attended switches the map source from the raw
// stage activations to the attention-scaled ones.
Heatmap compute_gradcam(ModelParams& model, const Tensor& volume, size_t stage,
                        size_t target_class, bool use_attended = false);

// writes <prefix>.vraw plus per-axis mid-slice PGMs and 0.5-alpha overlays
void export_heatmap(const Heatmap& heatmap, const Tensor& input_volume,
                    const std::string& path_prefix);

}  // namespace volnet

#endif
