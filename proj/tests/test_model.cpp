#include <cmath>
#include <complex>
#include <filesystem>

#include "dart/model.hpp"
#include "dart/scene.hpp"
#include "doctest.h"

using namespace dart;

namespace {

const DetectorModel& toy() {
    static const DetectorModel m = build_model(ModelConfig{});
    return m;
}

Tensor scene(std::uint64_t seed) { return render_scene({.seed = seed}).image; }

double max_rel_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(b[i])));
    }
    return worst;
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("dart_test_" + name);
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig c;
    c.global_blocks = {};
    CHECK_THROWS_AS(build_model(c), ConfigError);
    c = {};
    c.global_blocks = {9};
    CHECK_THROWS_AS(build_model(c), ConfigError);
    c = {};
    c.embed_dim = 30;  // not divisible by heads
    CHECK_THROWS_AS(build_model(c), ConfigError);
    CHECK(config_from_json(config_to_json(ModelConfig{})).global_blocks == ModelConfig{}.global_blocks);
}

TEST_CASE("build is deterministic and seed sensitive") {
    ModelConfig c;
    const auto a = build_model(c);
    const auto b = build_model(c);
    CHECK(weights_checksum(a) == weights_checksum(b));
    c.seed = 1;
    CHECK(weights_checksum(build_model(c)) != weights_checksum(a));
    CHECK(a.parameter_count() > 0);
}

TEST_CASE("backbone shapes and determinism") {
    const auto& m = toy();
    const auto f = backbone_forward(m, scene(3), PrecisionMode::Fp32);
    CHECK(f.levels[0].shape() == Shape{64, 64});
    CHECK(f.levels[1].shape() == Shape{16, 64});
    CHECK(f.levels[2].shape() == Shape{4, 64});
    CHECK(f.plan_id.empty());
    CHECK(f.bitwise_equal(backbone_forward(m, scene(3), PrecisionMode::Fp32)));
    CHECK_FALSE(f.bitwise_equal(backbone_forward(m, scene(4), PrecisionMode::Fp32)));
    CHECK_THROWS_AS(backbone_forward(m, Tensor::zeros({32, 32, 3}), PrecisionMode::Fp32), DimensionError);
}

TEST_CASE("stage composition equals backbone_forward") {
    const auto& m = toy();
    const Tensor img = scene(5);
    Tensor x = embed_patches(m, img, PrecisionMode::Fp32);
    for (std::size_t b = 0; b < m.blocks.size(); ++b) {
        x = apply_sub_block(m, b, SubBlockKind::Attn, x, PrecisionMode::Fp32);
        x = apply_sub_block(m, b, SubBlockKind::Mlp, x, PrecisionMode::Fp32);
    }
    CHECK(project_fpn(m, x, PrecisionMode::Fp32).bitwise_equal(backbone_forward(m, img, PrecisionMode::Fp32)));
}

TEST_CASE("every sub-block disabled leaves the patch embedding") {
    DetectorModel m = toy();
    for (auto& b : m.blocks) b.attn_enabled = b.mlp_enabled = false;
    const Tensor img = scene(6);
    const auto f = backbone_forward(m, img, PrecisionMode::Fp32);
    CHECK(f.bitwise_equal(project_fpn(m, embed_patches(m, img, PrecisionMode::Fp32), PrecisionMode::Fp32)));
    CHECK(f.plan_id.find("0.attn") == 0);

    for (auto& b : m.blocks) b.attn_enabled = b.mlp_enabled = true;
    CHECK(backbone_forward(m, img, PrecisionMode::Fp32).bitwise_equal(backbone_forward(toy(), img, PrecisionMode::Fp32)));
}

TEST_CASE("rotary tables match a complex-arithmetic oracle") {
    const auto& m = toy();
    const auto& cfg = m.config;
    const std::size_t pairs = cfg.head_dim() / 2, per_axis = pairs / 2, grid = cfg.grid();

    // Rotate (x_2i, x_2i+1) as a complex number by e^{i pos * 100^(-j/per_axis)}.
    RopeFn oracle = [&](const Tensor& x, const Tensor&, const Tensor&) {
        const std::size_t tokens = x.dim(x.rank() - 2), ch = x.dim(x.rank() - 1);
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < x.size() / ch; ++i) {
            const std::size_t t = i % tokens, row = t / grid, col = t % grid;
            for (std::size_t p = 0; p < ch / 2; ++p) {
                const std::size_t j = p % per_axis;
                const double pos = static_cast<double>(p < per_axis ? col : row);
                const double angle = pos * std::pow(100.0, -static_cast<double>(j) / static_cast<double>(per_axis));
                const std::complex<double> z(x[i * ch + 2 * p], x[i * ch + 2 * p + 1]);
                const auto r = z * std::polar(1.0, angle);
                out[i * ch + 2 * p] = r.real();
                out[i * ch + 2 * p + 1] = r.imag();
            }
        }
        return Tensor(x.shape(), std::move(out));
    };
    const Tensor img = scene(7);
    const auto ref = backbone_forward(m, img, PrecisionMode::Fp32);
    const auto alt = backbone_forward(m, img, PrecisionMode::Fp32, {.rope = oracle});
    for (std::size_t l = 0; l < 3; ++l) CHECK(max_rel_diff(alt.levels[l], ref.levels[l]) < 1e-6);
    CHECK(m.rope_cos.shape() == Shape{64, pairs});
}

TEST_CASE("text encoding and cache") {
    const auto& m = toy();
    const auto t = text_encode(m, {"car", "person", "car"});
    REQUIRE(t.tokens.size() == 3);
    CHECK(t.tokens[0].shape() == Shape{8, 64});
    CHECK(t.tokens[0].bitwise_equal(t.tokens[2]));
    CHECK_FALSE(t.tokens[0].bitwise_equal(t.tokens[1]));
    CHECK(t.batch().shape() == Shape{3, 8, 64});
    CHECK_THROWS_AS(text_encode(m, {""}), std::invalid_argument);
    CHECK_THROWS_AS(text_encode(m, {}), std::invalid_argument);

    TextCache cache;
    const auto first = text_encode(m, {"car"}, &cache);
    CHECK(cache.misses() == 1);
    const auto second = text_encode(m, {"car"}, &cache);
    CHECK(cache.hits() == 1);
    CHECK(first.tokens[0].bitwise_equal(second.tokens[0]));
    CHECK(first.tokens[0].bitwise_equal(t.tokens[0]));

    ModelConfig other;
    other.seed = 9;
    text_encode(build_model(other), {"car"}, &cache);
    CHECK(cache.size() == 1);  // rebound to the other model
}

TEST_CASE("backbone takes no text: features are class agnostic") {
    // The backbone signature has no text input; the same FPN feeds every prompt.
    const auto& m = toy();
    const auto f = backbone_forward(m, scene(8), PrecisionMode::Fp32);
    const auto a = encdec_forward(m, f, text_encode(m, {"car"}), PrecisionMode::Fp32);
    const auto b = encdec_forward(m, f, text_encode(m, {"person"}), PrecisionMode::Fp32);
    CHECK_FALSE(a.score_logits.bitwise_equal(b.score_logits));
}

TEST_CASE("class batch rows are independent") {
    const auto& m = toy();
    const auto f = backbone_forward(m, scene(9), PrecisionMode::Fp32);
    const std::vector<std::string> names{"car", "person", "dog", "car"};
    const auto all = encdec_forward(m, f, text_encode(m, names), PrecisionMode::Fp32);
    CHECK(all.batch() == 4);
    CHECK(all.query_features.shape() == Shape{4, 16, 64});
    CHECK(all.boxes.shape() == Shape{4, 16, 4});
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto one = encdec_forward(m, f, text_encode(m, {names[i]}), PrecisionMode::Fp32);
        CHECK(one.bitwise_equal(all.rows(i, i + 1)));
    }
    CHECK(all.rows(0, 1).bitwise_equal(all.rows(3, 4)));  // identical prompts, identical rows

    const auto perm = encdec_forward(m, f, text_encode(m, {"dog", "car", "person", "car"}), PrecisionMode::Fp32);
    CHECK(perm.rows(0, 1).bitwise_equal(all.rows(2, 3)));
    CHECK(perm.rows(2, 3).bitwise_equal(all.rows(1, 2)));
    CHECK(concat_batches({all.rows(0, 2), all.rows(2, 4)}).bitwise_equal(all));

    for (double v : all.boxes.data()) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("mask head") {
    const auto& m = toy();
    const auto f = backbone_forward(m, scene(10), PrecisionMode::Fp32);
    const auto q = encdec_forward(m, f, text_encode(m, {"car", "person"}), PrecisionMode::Fp32);
    CHECK(mask_head_forward(m, f, q).shape() == Shape{2, 16, 64});

    DetectorModel zeroed = m;
    for (auto* lin : {&zeroed.mask_head->query_fc1, &zeroed.mask_head->query_fc2}) {
        lin->bias = Tensor::zeros(lin->bias.shape());
    }
    RawQueryOutputs zq = q;
    zq.query_features = Tensor::zeros(q.query_features.shape());
    const Tensor logits = mask_head_forward(zeroed, f, zq);
    for (double v : logits.data()) CHECK(v == 0.0);

    const auto stripped = strip_mask_head(m);
    CHECK_THROWS_AS(mask_head_forward(stripped, f, q), MaskHeadRemoved);
    CHECK(stripped.parameter_count() < m.parameter_count());
    CHECK(weights_checksum(stripped, encdec_weight_prefixes()) != 0);
}

TEST_CASE("save and load round trip bit-exactly") {
    DetectorModel m = toy();
    m.blocks[2].mlp_enabled = false;
    const auto path = temp_path("model.bin");
    save_model(m, path);
    const auto back = load_model(path);
    CHECK(weights_checksum(back) == weights_checksum(m));
    CHECK_FALSE(back.blocks[2].mlp_enabled);
    CHECK(config_to_json(back.config) == config_to_json(m.config));
    const Tensor img = scene(11);
    CHECK(backbone_forward(back, img, PrecisionMode::Fp32).bitwise_equal(backbone_forward(m, img, PrecisionMode::Fp32)));
    std::filesystem::remove(path);
    CHECK_THROWS(load_model(temp_path("missing.bin")));
}

TEST_CASE("truncation") {
    const auto& m = toy();
    const auto t4 = truncate_backbone(m, 4);
    CHECK(t4.blocks.size() == 4);
    CHECK(t4.config.global_blocks == std::set<std::size_t>{3});
    const auto t2 = truncate_backbone(m, 2);
    CHECK(t2.config.global_blocks == std::set<std::size_t>{1});
    CHECK(t2.blocks[1].kind == BlockKind::Global);
    CHECK_THROWS_AS(truncate_backbone(m, 9), ConfigError);
    CHECK(backbone_forward(truncate_backbone(m, 8), scene(1), PrecisionMode::Fp32)
              .bitwise_equal(backbone_forward(m, scene(1), PrecisionMode::Fp32)));
}

TEST_CASE("half modes stay close to fp32 at the toy scale") {
    const auto& m = toy();
    const Tensor img = scene(12);
    const auto ref = backbone_forward(m, img, PrecisionMode::Fp32);
    const auto h32 = backbone_forward(m, img, PrecisionMode::Fp16AccumFp32);
    CHECK(cosine_similarity(h32.levels[0], ref.levels[0]) > 0.99);
    for (double v : h32.levels[0].data()) CHECK(v == round_half(v));
}
