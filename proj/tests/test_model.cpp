#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>

#include "support.hpp"
#include "volnet/model.hpp"

using namespace volnet;
using testsupport::finite_diff;
using testsupport::grad_check;
using testsupport::random_tensor;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.stage_channels = {4, 8, 16, 32};
    cfg.reduction = 2;
    return cfg;
}

}  // namespace

TEST_CASE("default config pins") {
    ModelConfig cfg;  // published architecture defaults
    CHECK(cfg.fused_width() == 960);
    CHECK(64 + 128 + 256 + 512 == 960);

    auto m = build_model(cfg, 1);
    // counts recorded once from the constructed namespace
    CHECK(m.params.size() == 110);
    CHECK(m.total_values() == 33238338);

    auto m2 = build_model(cfg, 1);
    for (size_t i = 0; i < m.params.size(); ++i) {
        CHECK(m.params[i].name == m2.params[i].name);
        CHECK(m.params[i].value.vec() == m2.params[i].value.vec());
    }
}

TEST_CASE("invalid configs are rejected") {
    ModelConfig bad = tiny_config();
    bad.num_classes = 1;
    CHECK_THROWS_AS(build_model(bad, 1), InvalidConfigError);
    bad = tiny_config();
    bad.reduction = 3;  // does not divide 4
    CHECK_THROWS_AS(build_model(bad, 1), InvalidConfigError);
}

TEST_CASE("fuse_features concatenates in stage order") {
    std::vector<Tensor> gaps;
    for (size_t s = 0; s < 4; ++s) {
        const size_t widths[4] = {64, 128, 256, 512};
        gaps.emplace_back(std::vector<size_t>{2, widths[s]},
                          static_cast<float>(s + 1));
    }
    auto fused = fuse_features(gaps);
    CHECK(fused.dim(1) == 960);
    const size_t offsets[5] = {0, 64, 192, 448, 960};
    for (size_t n = 0; n < 2; ++n) {
        for (size_t s = 0; s < 4; ++s) {
            for (size_t i = offsets[s]; i < offsets[s + 1]; ++i) {
                CHECK(fused[n * 960 + i] == static_cast<float>(s + 1));
            }
        }
    }

    std::vector<Tensor> mismatched = {Tensor({2, 4}), Tensor({3, 4})};
    CHECK_THROWS_AS(fuse_features(mismatched), ShapeError);
}

TEST_CASE("forward shapes for the default configuration") {
    ModelConfig cfg;
    auto m = build_model(cfg, 3);
    auto input = random_tensor<float>({2, 1, 32, 32, 32}, 5, 0.5);
    auto tr = model_forward(m, input, false);
    CHECK(tr.logits.shape() == std::vector<size_t>{2, 2});
    CHECK(tr.fused.shape() == std::vector<size_t>{2, 960});
    for (size_t n = 0; n < 2; ++n) {
        double s = 0;
        for (size_t k = 0; k < 2; ++k) s += tr.probs[n * 2 + k];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("zero attention MLP makes fused equal half the raw GAPs") {
    auto cfg = tiny_config();
    auto m = build_model(cfg, 7);
    for (size_t s = 1; s <= 4; ++s) {
        auto& w1 = m.at("attn" + std::to_string(s) + ".w1");
        auto& w2 = m.at("attn" + std::to_string(s) + ".w2");
        std::fill(w1.value.vec().begin(), w1.value.vec().end(), 0.0f);
        std::fill(w2.value.vec().begin(), w2.value.vec().end(), 0.0f);
    }
    auto input = random_tensor<float>({2, 1, 16, 16, 16}, 11, 0.5);
    auto tr = model_forward(m, input, false);
    std::vector<Tensor> half_gaps;
    for (size_t s = 0; s < 4; ++s) {
        auto gap = global_avg_pool3d(tr.stage_outputs[s]);
        for (size_t i = 0; i < gap.size(); ++i) gap[i] *= 0.5f;
        half_gaps.push_back(std::move(gap));
    }
    auto want = fuse_features(half_gaps);
    CHECK(tr.fused.vec() == want.vec());
}

TEST_CASE("attention taps never perturb the main path") {
    auto cfg = tiny_config();
    auto a = build_model(cfg, 13);
    auto b = build_model(cfg, 13);
    for (size_t s = 1; s <= 4; ++s) {
        auto& w1 = b.at("attn" + std::to_string(s) + ".w1");
        auto& w2 = b.at("attn" + std::to_string(s) + ".w2");
        std::fill(w1.value.vec().begin(), w1.value.vec().end(), 0.0f);
        std::fill(w2.value.vec().begin(), w2.value.vec().end(), 0.0f);
    }
    auto input = random_tensor<float>({1, 1, 16, 16, 16}, 17, 0.5);
    auto ta = model_forward(a, input, false);
    auto tb = model_forward(b, input, false);
    for (size_t s = 0; s < 4; ++s) {
        CHECK(ta.stage_outputs[s].vec() == tb.stage_outputs[s].vec());
    }
}

TEST_CASE("inference forward is a pure function") {
    auto m = build_model(tiny_config(), 19);
    auto input = random_tensor<float>({1, 1, 16, 16, 16}, 23, 0.5);
    auto t1 = model_forward(m, input, false);
    auto t2 = model_forward(m, input, false);
    CHECK(t1.logits.vec() == t2.logits.vec());
    CHECK(t1.fused.vec() == t2.fused.vec());

    // argmax of logits and probs agree
    for (size_t n = 0; n < t1.logits.dim(0); ++n) {
        const size_t al = t1.logits[n * 2] > t1.logits[n * 2 + 1] ? 0 : 1;
        const size_t ap = t1.probs[n * 2] > t1.probs[n * 2 + 1] ? 0 : 1;
        CHECK(al == ap);
    }
}

TEST_CASE("fused length tracks any stage channel configuration") {
    ModelConfig cfg;
    cfg.stage_channels = {2, 4, 6, 8};
    cfg.reduction = 2;
    auto m = build_model(cfg, 29);
    auto input = random_tensor<float>({1, 1, 16, 16, 16}, 31, 0.5);
    auto tr = model_forward(m, input, false);
    CHECK(tr.fused.dim(1) == 20);
}

TEST_CASE("degenerate input names the failing stage") {
    auto m = build_model(tiny_config(), 37);
    Tensor input({1, 1, 2, 2, 2});
    CHECK_THROWS_WITH_AS(model_forward(m, input, false),
                         doctest::Contains("stem"), DegenerateOutputError);
}

TEST_CASE("model_backward rejects inference traces and zero grads stay zero") {
    auto m = build_model(tiny_config(), 41);
    // batch of 2 so the deepest stage (1x1x1 spatial) still has enough
    // elements for training-mode batch statistics
    auto input = random_tensor<float>({2, 1, 8, 8, 8}, 43, 0.5);
    auto tr = model_forward(m, input, false);
    Tensor gl({2, 2});
    CHECK_THROWS_AS(model_backward(m, tr, gl), InferenceTraceError);

    auto tr2 = model_forward(m, input, true);
    m.zero_grads();
    model_backward(m, tr2, gl);
    for (const auto& p : m.params) {
        for (size_t i = 0; i < p.grad.size(); ++i) CHECK(p.grad[i] == 0.0f);
    }
}

TEST_CASE("full tiny model gradient matches finite differences") {
    ModelConfig cfg = tiny_config();
    auto m = build_model_t<double>(cfg, 47);
    auto input = random_tensor<double>({2, 1, 8, 8, 8}, 53, 0.5);
    std::vector<size_t> labels = {1, 0};

    auto loss_of = [&]() {
        auto tr = model_forward(m, input, true);
        return static_cast<double>(softmax_cross_entropy(tr.logits, labels).loss);
    };

    m.zero_grads();
    {
        auto tr = model_forward(m, input, true);
        auto ce = softmax_cross_entropy(tr.logits, labels);
        model_backward(m, tr, ce.grad_logits);
    }

    // 20 randomly sampled trainable parameters across the whole namespace
    CounterRng rng(59);
    std::vector<ParamTensorT<double>*> trainable;
    for (auto& p : m.params) {
        if (p.trainable) trainable.push_back(&p);
    }
    int checked = 0;
    double worst = 0;
    while (checked < 20) {
        auto& p = *trainable[rng.next_u64() % trainable.size()];
        const size_t j = rng.next_u64() % p.value.size();
        const double orig = p.value[j];
        const double step = 1e-5;
        p.value[j] = orig + step;
        const double fp = loss_of();
        p.value[j] = orig - step;
        const double fm = loss_of();
        p.value[j] = orig;
        const double numeric = (fp - fm) / (2 * step);
        const double denom = std::max({std::fabs(numeric), std::fabs(p.grad[j]), 1e-6});
        worst = std::max(worst, std::fabs(numeric - p.grad[j]) / denom);
        ++checked;
    }
    CHECK(worst <= 1e-3);
}

TEST_CASE("detaching the attention taps changes stem gradients") {
    auto m = build_model(tiny_config(), 61);
    auto input = random_tensor<float>({2, 1, 8, 8, 8}, 67, 0.5);
    Tensor gl = Tensor::from_data({2, 2}, {1.0f, -1.0f, -0.5f, 0.5f});

    auto tr = model_forward(m, input, true);
    m.zero_grads();
    model_backward(m, tr, gl);
    Tensor with_taps = m.at("stem.conv.weight").grad;

    auto tr2 = model_forward(m, input, true);
    m.zero_grads();
    BackwardOptions opts;
    opts.detach_attention_taps = true;
    model_backward(m, tr2, gl, opts);
    Tensor without_taps = m.at("stem.conv.weight").grad;

    bool differs = false;
    for (size_t i = 0; i < with_taps.size(); ++i) {
        if (with_taps[i] != without_taps[i]) differs = true;
    }
    CHECK(differs);
}

TEST_CASE("parameter manifest lists names, shapes and fused width") {
    auto m = build_model(tiny_config(), 71);
    auto manifest = parameter_manifest(m);
    CHECK(manifest.find("stem.conv.weight [4,1,3,3,3]") != std::string::npos);
    CHECK(manifest.find("fc.weight [60,2]") != std::string::npos);
    CHECK(manifest.find("fused_width 60") != std::string::npos);
}

TEST_CASE("full-resolution volume runs to finite logits" * doctest::skip(std::getenv("VOLNET_SLOW_TESTS") == nullptr)) {
    ModelConfig cfg;  // default full-size configuration
    auto m = build_model(cfg, 73);
    auto input = random_tensor<float>({1, 1, 121, 145, 121}, 79, 0.3);
    auto tr = model_forward(m, input, false);
    for (size_t i = 0; i < tr.logits.size(); ++i) CHECK(std::isfinite(tr.logits[i]));
}
