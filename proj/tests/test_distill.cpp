#include <cmath>
#include <filesystem>
#include <random>

#include "dart/distill.hpp"
#include "dart/scene.hpp"
#include "doctest.h"

using namespace dart;

namespace {

constexpr std::array<std::size_t, 3> kRows{16, 8, 4}, kStudent{6, 5, 3}, kTeacher{4, 4, 4};

const PlantedProblem& exact() {
    static const auto p = planted_problem(1, 4, kRows, kStudent, kTeacher);
    return p;
}

const PlantedProblem& noisy() {
    static const auto p = planted_problem(2, 4, kRows, kStudent, kTeacher, 0.1);
    return p;
}

const DetectorModel& teacher() {
    static const DetectorModel m = build_model(ModelConfig{});
    return m;
}

const DetectorModel& student() {
    static const DetectorModel m = build_model(default_student_config(ModelConfig{}, 1));
    return m;
}

Adapter perturbed(const Adapter& a, std::uint64_t seed, double eps) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, eps);
    Adapter out = a;
    for (auto& lvl : out.levels) {
        for (Tensor* t : {&lvl.weight, &lvl.bias}) {
            std::vector<double> d(t->data().begin(), t->data().end());
            for (auto& v : d) v += n(rng);
            *t = Tensor(t->shape(), std::move(d));
        }
    }
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

/// Loss of the best constant predictor: the teacher's per-level column means.
double bias_only_loss(const std::vector<FpnFeatures>& teacher) {
    double total = 0.0;
    for (std::size_t l = 0; l < 3; ++l) {
        const std::size_t d = teacher[0].levels[l].dim(1);
        std::vector<double> mean(d, 0.0);
        std::size_t rows = 0;
        for (const auto& f : teacher) {
            const auto& t = f.levels[l];
            for (std::size_t r = 0; r < t.dim(0); ++r)
                for (std::size_t c = 0; c < d; ++c) mean[c] += t[r * d + c];
            rows += t.dim(0);
        }
        for (auto& m : mean) m /= static_cast<double>(rows);
        for (const auto& f : teacher) {
            const auto& t = f.levels[l];
            for (std::size_t r = 0; r < t.dim(0); ++r)
                for (std::size_t c = 0; c < d; ++c) total += std::pow(t[r * d + c] - mean[c], 2);
        }
    }
    return total / static_cast<double>(teacher.size());
}

}  // namespace

TEST_CASE("student config") {
    const auto c = default_student_config(ModelConfig{}, 5);
    CHECK_NOTHROW(c.validate());
    CHECK(c.num_blocks < ModelConfig{}.num_blocks);
    CHECK(c.grid() == ModelConfig{}.grid());
    CHECK(c.seed == 5);
}

TEST_CASE("planted recovery") {
    const auto fit = fit_adapter_closed_form(exact().student, exact().teacher, 1e-10);
    for (std::size_t l = 0; l < 3; ++l) {
        CHECK(max_abs_diff(fit.levels[l].weight, exact().truth.levels[l].weight) < 1e-3);
        CHECK(max_abs_diff(fit.levels[l].bias, exact().truth.levels[l].bias) < 1e-3);
    }
    CHECK(fit.meta.method == "closed-form");
    CHECK(fit.meta.final_loss < 1e-12);
    CHECK(distill_loss(exact().truth, exact().student, exact().teacher) < 1e-20);
}

TEST_CASE("closed form is a minimum") {
    const auto fit = fit_adapter_closed_form(noisy().student, noisy().teacher, 0.0);
    const double best = distill_loss(fit, noisy().student, noisy().teacher);
    for (std::uint64_t s = 0; s < 100; ++s) {
        CHECK(distill_loss(random_adapter(kStudent, kTeacher, s), noisy().student, noisy().teacher) >= best);
    }
    for (std::uint64_t s = 0; s < 50; ++s) {
        CHECK(distill_loss(perturbed(fit, s, 1e-3), noisy().student, noisy().teacher) >= best - 1e-9);
    }
}

TEST_CASE("heavy ridge leaves only the bias") {
    const auto fit = fit_adapter_closed_form(noisy().student, noisy().teacher, 1e9);
    for (const auto& lvl : fit.levels) {
        for (double w : lvl.weight.data()) CHECK(std::abs(w) < 1e-6);
    }
    CHECK(fit.meta.final_loss == doctest::Approx(bias_only_loss(noisy().teacher)).epsilon(1e-6));
}

TEST_CASE("gradient descent") {
    SUBCASE("one step descends") {
        const auto one = fit_adapter_gd(noisy().student, noisy().teacher, {.steps = 1});
        REQUIRE(one.loss_curve.size() == 2);
        CHECK(one.loss_curve[1] < one.loss_curve[0]);
        CHECK(one.meta.method == "gd");
    }
    SUBCASE("loss is non-increasing and matches the closed form") {
        const auto gd = fit_adapter_gd(noisy().student, noisy().teacher, {.steps = 2000});
        REQUIRE(gd.loss_curve.size() == 2001);
        const double tol = 1e-12 * gd.loss_curve[0];
        for (std::size_t i = 1; i < gd.loss_curve.size(); ++i) CHECK(gd.loss_curve[i] <= gd.loss_curve[i - 1] + tol);
        const auto cf = fit_adapter_closed_form(noisy().student, noisy().teacher, 0.0);
        CHECK(std::abs(gd.meta.final_loss - cf.meta.final_loss) <= 1e-4 * cf.meta.final_loss);
    }
    SUBCASE("a huge step diverges and names the step") {
        try {
            fit_adapter_gd(noisy().student, noisy().teacher, {.steps = 5000, .step_size = 10.0});
            FAIL("expected divergence");
        } catch (const DivergenceError& e) {
            CHECK(e.step > 0);
            CHECK(e.step <= 5000);
        }
    }
    CHECK_THROWS(fit_adapter_gd(noisy().student, noisy().teacher, {.steps = 0}));
    CHECK_THROWS(fit_adapter_gd(noisy().student, noisy().teacher, {.steps = 5, .step_size = -1.0}));
    const auto lm = hessian_lambda_max(noisy().student);
    for (double v : lm) CHECK(v > 0.0);
}

TEST_CASE("fit preconditions") {
    const auto few = planted_problem(3, 1, {4, 4, 4}, kStudent, kTeacher);
    CHECK_THROWS(fit_adapter_closed_form(few.student, few.teacher));  // 4 rows < 7 unknowns

    // Duplicate a student column: singular without ridge, fine with it.
    auto dup = exact();
    for (auto& f : dup.student) {
        const auto& t = f.levels[0];
        std::vector<double> d(t.data().begin(), t.data().end());
        for (std::size_t r = 0; r < t.dim(0); ++r) d[r * t.dim(1) + 1] = d[r * t.dim(1)];
        f.levels[0] = Tensor(t.shape(), std::move(d));
    }
    CHECK_THROWS(fit_adapter_closed_form(dup.student, dup.teacher, 0.0));
    CHECK_NOTHROW(fit_adapter_closed_form(dup.student, dup.teacher, 1e-3));
    CHECK_THROWS(fit_adapter_closed_form(exact().student, exact().teacher, -1.0));
    CHECK_THROWS_AS(fit_adapter_closed_form({exact().student[0]}, exact().teacher), DimensionError);
    CHECK_THROWS(fit_adapter_closed_form({}, {}));
}

TEST_CASE("adapter shapes and application") {
    const auto id = identity_adapter({3, 4, 5});
    CHECK(id.parameter_count() == 9 + 3 + 16 + 4 + 25 + 5);
    CHECK_NOTHROW(id.validate());
    const auto bad = random_adapter(kStudent, kTeacher, 0);
    CHECK_THROWS(apply_adapter(bad, exact().teacher[0]));
    const auto out = apply_adapter(exact().truth, exact().student[0]);
    for (std::size_t l = 0; l < 3; ++l) CHECK(max_abs_diff(out.levels[l], exact().teacher[0].levels[l]) < 1e-12);
}

TEST_CASE("save and load") {
    auto fit = fit_adapter_gd(noisy().student, noisy().teacher, {.steps = 10});
    const auto path = std::filesystem::temp_directory_path() / "dart_test_adapter.bin";
    save_adapter(fit, path);
    const auto back = load_adapter(path);
    std::filesystem::remove(path);
    CHECK(back.meta.method == "gd");
    CHECK(back.meta.steps == 10);
    CHECK(back.loss_curve == fit.loss_curve);
    for (std::size_t l = 0; l < 3; ++l) {
        CHECK(back.levels[l].weight.shape() == fit.levels[l].weight.shape());
        CHECK(max_abs_diff(back.levels[l].weight, fit.levels[l].weight) < 1e-6);
    }
    CHECK_THROWS(load_adapter(path));
}

TEST_CASE("self distillation through the identity agrees perfectly") {
    const auto imgs = synthetic_images(300, 2);
    PipelineConfig cfg = PipelineConfig::for_level(PipelineLevel::BatchedDetOnly);
    cfg.presence_threshold = 0.0;
    cfg.score_threshold = 0.0;
    const auto r = evaluate_agreement(teacher(), teacher(), identity_adapter({64, 64, 64}), imgs, {"car", "person"}, cfg);
    CHECK(r.teacher_detections > 0);
    CHECK(r.agreement == 1.0);
    CHECK(r.matched == r.teacher_detections);
    for (double c : r.level_cosine) CHECK(c == doctest::Approx(1.0));
    CHECK(r.encdec_checksum_before == r.encdec_checksum_after);
}

TEST_CASE("toy student fit") {
    const auto imgs = synthetic_images(400, 16);
    const auto fs1 = extract_features(student(), imgs, 1);
    const auto fs2 = extract_features(student(), imgs, 2);
    for (std::size_t i = 0; i < imgs.size(); ++i) CHECK(fs1[i].bitwise_equal(fs2[i]));

    const std::uint64_t before = weights_checksum(teacher(), encdec_weight_prefixes());
    const auto fit = fit_adapter_closed_form(student(), teacher(), imgs);
    CHECK(weights_checksum(teacher(), encdec_weight_prefixes()) == before);
    const auto ft = extract_features(teacher(), imgs);
    const auto rnd = random_adapter({32, 32, 32}, {64, 64, 64}, 0);
    CHECK(fit.meta.final_loss < distill_loss(rnd, fs1, ft));
    CHECK_NOTHROW(fit.validate());
}
