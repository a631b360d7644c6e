// Acceptance run: one PASS/FAIL line per headline criterion, exit 1 on any FAIL.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>

#include "dart/cli.hpp"
#include "dart/distill.hpp"
#include "dart/pipeline.hpp"
#include "dart/pruner.hpp"
#include "dart/scene.hpp"
#include "dart/scheduler.hpp"

using namespace dart;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void criterion(const std::string& name, const std::function<Outcome()>& body) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!o.pass) ++failures;
    std::printf("%s  %-22s %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), s);
    std::fflush(stdout);
}

double round1(double x) { return std::round(x * 10.0) / 10.0; }

std::string str(double x, int prec = 4) {
    std::ostringstream os;
    os.precision(prec);
    os << x;
    return os.str();
}

std::vector<std::string> class_names(std::size_t n) {
    static const std::vector<std::string> pool{"car", "person", "dog", "cat", "bus", "tree", "cup", "bird",
                                               "boat", "lamp"};
    return {pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n)};
}

PipelineConfig fp32(PipelineLevel level) {
    PipelineConfig cfg;
    cfg.level = level;
    return cfg;
}

Outcome level_equivalence() {
    std::size_t cases = 0, dets = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        ModelConfig mc;
        mc.seed = seed;
        const auto model = build_model(mc);
        const Tensor img = render_scene({.seed = 1000 + seed}).image;
        for (std::size_t n : {1, 2, 3, 8}) {
            const auto names = class_names(n);
            RunContext c0, c1;
            const auto naive = run_naive(model, img, names, fp32(PipelineLevel::Naive), c0);
            const auto shared = run_shared(model, img, names, fp32(PipelineLevel::SharedBackbone), c1);
            if (!bitwise_equal(naive, shared)) {
                return {false, "shared differs from naive at seed " + std::to_string(seed) + ", N=" + std::to_string(n)};
            }
            for (std::optional<std::size_t> n_max : {std::optional<std::size_t>(1), std::optional<std::size_t>(2),
                                                     std::optional<std::size_t>(4), std::optional<std::size_t>()}) {
                auto cfg = fp32(PipelineLevel::BatchedDetOnly);
                cfg.detection_only = true;
                cfg.n_max = n_max;
                RunContext c2;
                if (!bitwise_equal(naive, run_batched(model, img, names, cfg, c2))) {
                    return {false, "batched differs from naive at seed " + std::to_string(seed) + ", N=" +
                                       std::to_string(n)};
                }
                ++cases;
            }
            dets += naive.size();
        }
    }
    return {true, std::to_string(cases) + " batched configurations bitwise equal to naive, " + std::to_string(dets) +
                      " detections"};
}

Outcome hierarchy_latencies() {
    const auto p = load_preset("paper-pytorch-1008");
    const double l0 = latency_level(p, LatencyLevel::Naive, 3), l1 = latency_level(p, LatencyLevel::Shared, 3),
                 l2 = latency_level(p, LatencyLevel::Batched, 3), l3 = latency_level(p, LatencyLevel::CompiledBackbone, 3);
    auto q = p;
    q.compiled->overhead = calibrate_overhead_ms(*p.compiled, 3, p.observed.level_ms.at("pipelined"));
    const double l4 = latency_level(q, LatencyLevel::Pipelined, 3);
    const bool ok = l0 == 336.0 && l1 == 162.0 && l2 == 112.0 && l3 == 78.0 && l4 == 60.0;
    return {ok, str(l0) + "/" + str(l1) + "/" + str(l2) + "/" + str(l3) + "/" + str(l4) + " ms, overhead " +
                    str(q.compiled->overhead) + " ms"};
}

Outcome class_sweep() {
    const auto p = load_preset("paper-trt-1008");
    const std::vector<std::tuple<std::size_t, double, double, double>> rows{
        {1, 61.1, 16.3, 18.7}, {2, 64.6, 15.5, 17.6}, {4, 72.4, 13.8, 15.8}, {8, 87.9, 11.5, 12.5}};
    bool ok = true;
    std::string detail;
    for (const auto& [n, sum, seq, pipe] : rows) {
        const double ms = latency_level(p, LatencyLevel::Sequential, n);
        const double fps = round1(1000.0 / ms);
        const double bound = pipelined_fps_bound(p.pipeline_stages(), n);
        ok = ok && std::abs(round1(ms) - sum) < 1e-9 && std::abs(fps - seq) <= 0.1 + 1e-9 && bound >= pipe;
        detail += "N=" + std::to_string(n) + " " + str(round1(ms)) + "ms " + str(fps) + "fps bound " +
                  str(round1(bound)) + ">=" + str(pipe) + "; ";
    }
    return {ok, detail};
}

Outcome pipeline_bound() {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> t(0.5, 120.0), ov(1e-3, 20.0);
    std::uniform_int_distribution<int> frames(1, 200), coin(0, 2);
    std::size_t zero = 0;
    for (int i = 0; i < 1000; ++i) {
        StageTimings s;
        s.t_bb = t(rng);
        double ed = 0.0;
        for (std::size_t n = 1; n <= 8; n *= 2) {
            ed += t(rng) / 4;
            s.t_ed.push_back({n, ed});
        }
        s.overhead = coin(rng) == 0 ? 0.0 : ov(rng);
        const std::size_t n = 1 + static_cast<std::size_t>(i % 8);
        const auto trace = simulate_pipeline(s, n, static_cast<std::size_t>(frames(rng)));
        const double bound = pipelined_fps_bound(s, n);
        if (!trace_is_valid(trace)) return {false, "invalid trace for profile " + std::to_string(i)};
        const bool equal = std::abs(trace.fps - bound) <= 1e-9 * bound;
        if (trace.fps > bound * (1 + 1e-9)) return {false, "profile " + std::to_string(i) + " beats the bound"};
        if (equal != (s.overhead == 0.0)) {
            return {false, "profile " + std::to_string(i) + ": equality does not track zero overhead"};
        }
        zero += s.overhead == 0.0;
    }
    return {true, "1000 profiles, " + std::to_string(zero) + " with zero overhead hit the bound"};
}

Outcome greedy_oracle() {
    const auto calib = default_calibration();
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        ModelConfig mc;
        mc.seed = seed;
        const auto model = build_model(mc);
        const auto plan = greedy_prune(model, calib, 6, {.memoized = true});
        const auto reference = reference_features(model, calib);
        auto alive = prune_candidates(model, model.config.global_blocks);
        if (alive.size() != 12) return {false, "expected 12 candidates"};
        std::vector<SubBlockId> removed;
        for (const auto& step : plan.steps) {
            double best = std::numeric_limits<double>::infinity();
            std::size_t arg = 0;
            for (std::size_t i = 0; i < alive.size(); ++i) {
                auto trial = removed;
                trial.push_back(alive[i]);
                const double loss = reconstruction_loss(model, trial, calib, reference);
                if (loss < best) best = loss, arg = i;
            }
            if (!(alive[arg] == step.id)) {
                return {false, "seed " + std::to_string(seed) + " step " + std::to_string(removed.size() + 1) +
                                   ": greedy took " + to_string(step.id) + ", oracle " + to_string(alive[arg])};
            }
            removed.push_back(alive[arg]);
            alive.erase(alive.begin() + static_cast<std::ptrdiff_t>(arg));
        }
    }
    return {true, "10 seeds x 6 steps match the exhaustive per-step argmin"};
}

Outcome precision_degradation() {
    const std::vector<std::size_t> depths{2, 4, 8};
    const auto images = synthetic_images(100, 5);
    std::size_t ordered = 0;
    std::array<double, 3> mean16{}, mean32{};
    double min32 = 1.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        ModelConfig mc;
        mc.seed = seed;
        const auto rows = precision_study(build_model(mc), images, depths);
        bool ok = true;
        for (std::size_t d = 0; d < depths.size(); ++d) {
            const auto& a32 = rows[2 * d];
            const auto& a16 = rows[2 * d + 1];
            ok = ok && a16.mean_cosine < a32.mean_cosine;
            mean16[d] += a16.mean_cosine / 20.0;
            mean32[d] += a32.mean_cosine / 20.0;
            min32 = std::min(min32, a32.mean_cosine);
        }
        ordered += ok;
    }
    const bool monotone = mean16[0] >= mean16[1] && mean16[1] >= mean16[2];
    bool below = true;
    for (std::size_t d = 0; d < 3; ++d) below = below && mean16[d] < mean32[d];
    const bool ok = ordered >= 18 && monotone && below && min32 >= 0.99;
    return {ok, "ordering " + std::to_string(ordered) + "/20 seeds; acc16 mean " + str(mean16[0], 10) + " >= " +
                    str(mean16[1], 10) + " >= " + str(mean16[2], 10) + "; acc32 min " + str(min32, 8)};
}

Outcome distillation() {
    const std::array<std::size_t, 3> rows{16, 8, 4}, s_dims{6, 5, 3}, t_dims{4, 4, 4};
    const auto planted = planted_problem(11, 4, rows, s_dims, t_dims);
    const auto fit = fit_adapter_closed_form(planted.student, planted.teacher, 1e-10);
    double err = 0.0;
    for (std::size_t l = 0; l < 3; ++l) {
        for (std::size_t i = 0; i < fit.levels[l].weight.size(); ++i)
            err = std::max(err, std::abs(fit.levels[l].weight[i] - planted.truth.levels[l].weight[i]));
        for (std::size_t i = 0; i < fit.levels[l].bias.size(); ++i)
            err = std::max(err, std::abs(fit.levels[l].bias[i] - planted.truth.levels[l].bias[i]));
    }

    const auto noisy = planted_problem(12, 4, rows, s_dims, t_dims, 0.1);
    const auto cf = fit_adapter_closed_form(noisy.student, noisy.teacher, 0.0);
    const auto gd = fit_adapter_gd(noisy.student, noisy.teacher, {.steps = 2000});
    const double gap = std::abs(gd.meta.final_loss - cf.meta.final_loss) / cf.meta.final_loss;

    std::size_t wins = 0;
    bool frozen = true;
    PipelineConfig cfg = PipelineConfig::for_level(PipelineLevel::BatchedDetOnly);
    std::string per_seed;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        ModelConfig tc;
        tc.seed = seed;
        const auto teacher = build_model(tc);
        const auto student = build_model(default_student_config(tc, seed + 1));
        const auto train = synthetic_images(2000 + 100 * seed, 16);
        const auto held_out = synthetic_images(5000 + 100 * seed, 8);
        const auto adapter = fit_adapter_closed_form(student, teacher, train);
        const auto random = random_adapter(student.config.fpn_dims, teacher.config.fpn_dims, seed);
        const auto a = evaluate_agreement(teacher, student, adapter, held_out, scene_labels(), cfg);
        const auto b = evaluate_agreement(teacher, student, random, held_out, scene_labels(), cfg);
        wins += a.agreement >= b.agreement;
        frozen = frozen && a.encdec_checksum_before == a.encdec_checksum_after &&
                 b.encdec_checksum_before == b.encdec_checksum_after;
        per_seed += str(a.agreement, 3) + "/" + str(b.agreement, 3) + " ";
    }
    const bool ok = err < 1e-3 && gap <= 1e-4 && wins >= 9 && frozen;
    return {ok, "planted err " + str(err, 3) + "; gd gap " + str(gap, 3) + "; trained>=random " +
                    std::to_string(wins) + "/10 (" + per_seed + "); enc-dec " + (frozen ? "unchanged" : "CHANGED")};
}

Outcome chunking() {
    const auto model = build_model(ModelConfig{});
    const Tensor img = render_scene({.seed = 77}).image;
    std::vector<std::string> names;
    for (std::size_t i = 0; i < 80; ++i) names.push_back("class" + std::to_string(i));
    std::string detail;
    bool ok = true;
    for (const auto& [n, n_max, expect] : std::vector<std::tuple<std::size_t, std::size_t, std::size_t>>{
             {80, 16, 5}, {10, 4, 3}, {1, 1, 1}}) {
        const std::vector<std::string> sub(names.begin(), names.begin() + static_cast<std::ptrdiff_t>(n));
        auto cfg = PipelineConfig::for_level(PipelineLevel::BatchedDetOnly);
        RunContext whole;
        const auto ref = run_batched(model, img, sub, cfg, whole);
        cfg.n_max = n_max;
        RunContext ctx;
        const auto got = run_batched(model, img, sub, cfg, ctx);
        ok = ok && ctx.encdec_passes == expect && bitwise_equal(ref, got);
        detail += "(" + std::to_string(n) + "," + std::to_string(n_max) + ")->" + std::to_string(ctx.encdec_passes) +
                  (bitwise_equal(ref, got) ? " equal; " : " DIFFERENT; ");
    }
    return {ok, detail};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

Outcome determinism() {
    const auto dir = std::filesystem::temp_directory_path() / "dart_acceptance";
    std::filesystem::remove_all(dir);
    const std::vector<std::pair<std::string, std::vector<std::string>>> commands{
        {"detect", {"detect", "--classes", "car,person,dog", "--scenes", "2", "--verify"}},
        {"bench", {"bench", "--preset", "paper-trt-1008", "--verify"}},
        {"bench", {"bench", "--measure", "--warmup", "1", "--frames", "2", "--runs", "1"}},
        {"prune", {"prune", "--k", "2", "--calib", "2", "--memoized"}},
        {"precision", {"precision", "--images", "5", "--depths", "1,2,3"}},
        {"schedule", {"schedule", "--classes", "4", "--frames", "30"}},
        {"distill", {"distill", "--plant", "--method", "gd"}},
        {"distill", {"distill", "--train-images", "16", "--eval-images", "2"}},
    };
    for (auto [name, args] : commands) {
        args.insert(args.begin(), {"--out", dir.string(), "--seed", "3"});
        std::string payload[2];
        for (auto& p : payload) {
            std::ostringstream out, err;
            if (run_cli(args, out, err) != 0) return {false, name + " exited nonzero: " + err.str()};
            p = report_payload(slurp(dir / (name + ".report.json")));
        }
        if (payload[0] != payload[1]) return {false, name + " payload changed between runs"};
    }
    std::filesystem::remove_all(dir);
    return {true, std::to_string(commands.size()) + " invocations across 6 commands rerun byte-identically"};
}

}  // namespace

int main() {
    criterion("level-equivalence", level_equivalence);
    criterion("hierarchy-latency", hierarchy_latencies);
    criterion("class-sweep", class_sweep);
    criterion("pipeline-bound", pipeline_bound);
    criterion("greedy-oracle", greedy_oracle);
    criterion("precision", precision_degradation);
    criterion("distillation", distillation);
    criterion("chunking", chunking);
    criterion("determinism", determinism);
    std::printf("%s: %d failing\n", failures ? "FAIL" : "PASS", failures);
    return failures ? 1 : 0;
}
