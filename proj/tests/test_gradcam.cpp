#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "support.hpp"
#include "volnet/attention.hpp"
#include "volnet/data.hpp"
#include "volnet/gradcam.hpp"

using namespace volnet;
using testsupport::random_tensor;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.stage_channels = {4, 8, 16, 32};
    cfg.reduction = 2;
    return cfg;
}

void zero_attention(ModelParams& m) {
    for (size_t s = 1; s <= 4; ++s) {
        const std::string p = "attn" + std::to_string(s) + ".";
        for (const char* n : {"w1", "w2"}) {
            auto& t = m.at(p + n).value;
            for (size_t i = 0; i < t.size(); ++i) t[i] = 0.0f;
        }
    }
}

}  // namespace

TEST_CASE("alpha of a linear head on one stage-4 channel") {
    auto m = build_model(tiny_config(), 3);
    zero_attention(m);  // attention weights pin to exactly 0.5
    auto& fc = m.at("fc.weight").value;  // [fused, classes]
    for (size_t i = 0; i < fc.size(); ++i) fc[i] = 0.0f;
    const size_t stage4_offset = 4 + 8 + 16;
    fc[stage4_offset * 2 + 0] = 1.0f;  // logit 0 = fused entry of stage-4 channel 0
    auto& fb = m.at("fc.bias").value;
    fb[0] = fb[1] = 0.0f;

    auto input = random_tensor<float>({1, 1, 16, 16, 16}, 5, 0.5);
    auto trace = model_forward(m, input, false);
    // stage 4 is 1x1x1 spatial here, so the GAP divisor is 1 and the only
    // factor left is the 0.5 attention weight
    auto alpha = gradcam_weights(m, trace, 4, 0);
    REQUIRE(alpha.dim(0) == 32);
    CHECK(alpha[0] == 0.5f);
    for (size_t c = 1; c < 32; ++c) CHECK(alpha[c] == 0.0f);
}

TEST_CASE("zero classifier gives all-zero alpha and heatmap") {
    auto m = build_model(tiny_config(), 7);
    auto& fc = m.at("fc.weight").value;
    for (size_t i = 0; i < fc.size(); ++i) fc[i] = 0.0f;
    auto& fb = m.at("fc.bias").value;
    fb[0] = fb[1] = 0.0f;

    auto vol = random_tensor<float>({16, 16, 16}, 9, 0.5);
    auto hm = compute_gradcam(m, vol, 2, 1);
    CHECK(hm.pre_norm_max == 0.0f);
    for (size_t i = 0; i < hm.values.size(); ++i) CHECK(hm.values[i] == 0.0f);
}

TEST_CASE("stage-4 alpha matches a finite-difference tail oracle") {
    auto m = build_model(tiny_config(), 11);
    auto input = random_tensor<float>({1, 1, 16, 16, 16}, 13, 0.5);
    auto trace = model_forward(m, input, false);
    const size_t target = 1;
    auto alpha = gradcam_weights(m, trace, 4, target);

    // replay the tap-4 tail (attention -> GAP -> classifier slice) in double
    // on perturbed activations; stage 4 has no downstream stages, so this is
    // the complete dependence of the logit on its raw activations
    auto act = trace.stage_outputs[3].cast<double>();
    auto w1 = m.at("attn4.w1").value.cast<double>();
    auto w2 = m.at("attn4.w2").value.cast<double>();
    auto fc = m.at("fc.weight").value.cast<double>();
    const size_t stage4_offset = 4 + 8 + 16;
    auto tail = [&]() {
        auto att = attention_forward(act, w1, w2);
        auto gap = global_avg_pool3d(att.attended);  // [1, 32]
        double logit = 0;
        for (size_t c = 0; c < 32; ++c) {
            logit += gap[c] * fc[(stage4_offset + c) * 2 + target];
        }
        return logit;
    };
    auto numeric = testsupport::finite_diff(tail, act);

    const size_t V = act.dim(2) * act.dim(3) * act.dim(4);
    for (size_t c = 0; c < 32; ++c) {
        double mean = 0;
        for (size_t i = 0; i < V; ++i) mean += numeric[c * V + i];
        mean /= static_cast<double>(V);
        CHECK(testsupport::rel_err(alpha[c], mean) <= 1e-3);
    }
}

TEST_CASE("gradcam_weights validates stage, class and batch size") {
    auto m = build_model(tiny_config(), 17);
    auto input = random_tensor<float>({1, 1, 16, 16, 16}, 19, 0.5);
    auto trace = model_forward(m, input, false);
    CHECK_THROWS_AS(gradcam_weights(m, trace, 0, 0), InvalidStageError);
    CHECK_THROWS_AS(gradcam_weights(m, trace, 5, 0), InvalidStageError);
    CHECK_THROWS_AS(gradcam_weights(m, trace, 2, 2), InvalidStageError);

    auto batch = random_tensor<float>({2, 1, 16, 16, 16}, 23, 0.5);
    auto batch_trace = model_forward(m, batch, false);
    CHECK_THROWS_AS(gradcam_weights(m, batch_trace, 2, 0), ShapeError);
}

TEST_CASE("gradcam_map hand cases") {
    // one-hot alpha picks a single non-negative channel, rescaled to peak 1
    auto act = Tensor::from_data({1, 2, 1, 1, 4}, {1, 2, 0, 4, 9, 9, 9, 9});
    auto hm = gradcam_map(act, Tensor::from_data({2}, {1.0f, 0.0f}));
    CHECK(hm.pre_norm_max == 4.0f);
    CHECK(hm.values[0] == 0.25f);
    CHECK(hm.values[1] == 0.5f);
    CHECK(hm.values[2] == 0.0f);
    CHECK(hm.values[3] == 1.0f);

    // everywhere-negative weighted sum relus away to all zeros
    auto neg = gradcam_map(act, Tensor::from_data({2}, {-1.0f, 0.0f}));
    CHECK(neg.pre_norm_max == 0.0f);
    for (size_t i = 0; i < 4; ++i) CHECK(neg.values[i] == 0.0f);
}

TEST_CASE("gradcam_map matches a loop oracle") {
    auto act = random_tensor<float>({1, 3, 2, 2, 2}, 29);
    auto alpha = random_tensor<float>({3}, 31);
    auto hm = gradcam_map(act, alpha);

    const size_t V = 8;
    std::vector<float> raw(V, 0.0f);
    float mx = 0;
    for (size_t i = 0; i < V; ++i) {
        for (size_t c = 0; c < 3; ++c) raw[i] += alpha[c] * act[c * V + i];
        raw[i] = std::max(raw[i], 0.0f);
        mx = std::max(mx, raw[i]);
    }
    CHECK(hm.pre_norm_max == mx);
    for (size_t i = 0; i < V; ++i) {
        CHECK(hm.values[i] == doctest::Approx(mx > 0 ? raw[i] / mx : 0.0f).epsilon(1e-6));
        CHECK(hm.values[i] >= 0.0f);
        CHECK(hm.values[i] <= 1.0f);
    }
}

TEST_CASE("trilinear upsample basics") {
    Tensor flat({2, 2, 2}, 3.5f);
    auto up = trilinear_upsample(flat, {5, 7, 9});
    for (size_t i = 0; i < up.size(); ++i) CHECK(up[i] == doctest::Approx(3.5f));

    auto map = random_tensor<float>({3, 4, 5}, 37);
    auto same = trilinear_upsample(map, {3, 4, 5});
    for (size_t i = 0; i < map.size(); ++i) CHECK(same[i] == doctest::Approx(map[i]).epsilon(1e-6));
}

TEST_CASE("trilinear center of a 2x2x2 cube is the corner mean") {
    auto corners = random_tensor<float>({2, 2, 2}, 41);
    auto up = trilinear_upsample(corners, {3, 3, 3});
    double mean = 0;
    for (size_t i = 0; i < 8; ++i) mean += corners[i];
    mean /= 8.0;
    CHECK(up[(1 * 3 + 1) * 3 + 1] == doctest::Approx(mean).epsilon(1e-6));

    float lo = corners[0], hi = corners[0];
    for (size_t i = 0; i < 8; ++i) {
        lo = std::min(lo, corners[i]);
        hi = std::max(hi, corners[i]);
    }
    for (size_t i = 0; i < up.size(); ++i) {
        CHECK(up[i] >= lo - 1e-6f);
        CHECK(up[i] <= hi + 1e-6f);
    }
}

TEST_CASE("compute_gradcam upsamples to input shape and stages differ") {
    auto m = build_model(tiny_config(), 43);
    auto vol = random_tensor<float>({20, 18, 16}, 47, 0.5);
    auto h1 = compute_gradcam(m, vol, 1, 0);
    auto h3 = compute_gradcam(m, vol, 3, 0);
    CHECK(h1.values.shape() == vol.shape());
    CHECK(h3.values.shape() == vol.shape());
    CHECK(h1.stage == 1);
    CHECK(h3.stage == 3);
    float mx = 0;
    bool differ = false;
    for (size_t i = 0; i < h1.values.size(); ++i) {
        CHECK(h1.values[i] >= 0.0f);
        CHECK(h1.values[i] <= 1.0f);
        mx = std::max(mx, h1.values[i]);
        if (h1.values[i] != h3.values[i]) differ = true;
    }
    // normalization happens at stage resolution; interpolation can only keep
    // the peak at exactly 1 when it lands on an output sample point
    if (h1.pre_norm_max > 0) {
        CHECK(mx > 0.5f);
        CHECK(mx <= 1.0f);
    }
    CHECK(differ);

    auto attended = compute_gradcam(m, vol, 3, 0, true);
    CHECK(attended.values.shape() == vol.shape());
}

TEST_CASE("export_heatmap writes a round-trippable volume and slice images") {
    auto m = build_model(tiny_config(), 53);
    auto vol = random_tensor<float>({16, 16, 16}, 59, 0.5);
    auto hm = compute_gradcam(m, vol, 2, 1);
    const std::string prefix = tmp_path("cam");
    export_heatmap(hm, vol, prefix);

    auto back = read_raw(prefix + ".vraw");
    CHECK(back.vec() == hm.values.vec());

    for (const char* axis : {"z", "y", "x"}) {
        for (const std::string suffix : {std::string(".pgm"), std::string("_overlay.pgm")}) {
            const std::string p = prefix + "_" + axis + suffix;
            std::ifstream f(p, std::ios::binary);
            REQUIRE_MESSAGE(f.good(), p);
            std::string magic;
            f >> magic;
            CHECK(magic == "P5");
            size_t w = 0, h = 0, maxv = 0;
            f >> w >> h >> maxv;
            CHECK(w == 16);
            CHECK(h == 16);
            CHECK(maxv == 255);
            f.get();
            std::vector<unsigned char> px(w * h);
            f.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
            CHECK(f.gcount() == static_cast<std::streamsize>(px.size()));
        }
    }
}

TEST_CASE("all-zero heatmap overlays reduce to the input slice") {
    auto vol = random_tensor<float>({8, 8, 8}, 61, 0.5);
    Heatmap hm;
    hm.values = Tensor({8, 8, 8});
    const std::string prefix = tmp_path("zerocam");
    export_heatmap(hm, vol, prefix);

    std::ifstream f(prefix + "_z_overlay.pgm", std::ios::binary);
    REQUIRE(f.good());
    std::string magic;
    size_t w, h, maxv;
    f >> magic >> w >> h >> maxv;
    f.get();
    std::vector<unsigned char> px(w * h);
    f.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));

    float lo = vol[0], hi = vol[0];
    for (size_t i = 0; i < vol.size(); ++i) {
        lo = std::min(lo, vol[i]);
        hi = std::max(hi, vol[i]);
    }
    // blend weight 0.5 with zero heat: overlay is the half-intensity input
    for (size_t r = 0; r < 8; ++r) {
        for (size_t c = 0; c < 8; ++c) {
            const float v = vol[((8 / 2) * 8 + r) * 8 + c];
            const double expect = 0.5 * (v - lo) / (hi - lo);
            CHECK(px[r * 8 + c] == static_cast<unsigned char>(std::lround(expect * 255.0)));
        }
    }
}
