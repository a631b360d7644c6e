// SPDX-License-Identifier: Apache-2.0
#include "dart/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "CLI11.hpp"
#include "dart/distill.hpp"
#include "dart/pipeline.hpp"
#include "dart/pruner.hpp"
#include "dart/scene.hpp"
#include "dart/scheduler.hpp"
#include "json.hpp"

namespace dart {

namespace {

using nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

struct UsageError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct Globals {
    std::uint64_t seed = 0;
    std::string out = "dart-out";
    std::size_t jobs = 1;
};

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto b = item.find_first_not_of(" \t");
        if (b == std::string::npos) continue;
        const auto e = item.find_last_not_of(" \t");
        out.push_back(item.substr(b, e - b + 1));
    }
    return out;
}

std::vector<std::size_t> split_sizes(const std::string& text) {
    std::vector<std::size_t> out;
    for (const auto& s : split_list(text)) {
        std::size_t pos = 0;
        const auto v = std::stoull(s, &pos);
        if (pos != s.size()) throw UsageError("'" + s + "' is not a non-negative integer");
        out.push_back(v);
    }
    return out;
}

double round1(double v) { return std::round(v * 10.0) / 10.0; }

std::string fmt(double v, int precision = 2) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << v;
    return os.str();
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Aligned console table.
void print_table(std::ostream& os, const std::vector<std::string>& head,
                 const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> w(head.size());
    for (std::size_t c = 0; c < head.size(); ++c) {
        w[c] = head[c].size();
        for (const auto& r : rows) w[c] = std::max(w[c], r[c].size());
    }
    auto line = [&](const std::vector<std::string>& r) {
        for (std::size_t c = 0; c < r.size(); ++c) {
            os << (c ? "  " : "") << std::setw(static_cast<int>(w[c])) << r[c];
        }
        os << '\n';
    };
    line(head);
    for (const auto& r : rows) line(r);
}

/// Builds and emits one RunReport.
class Report {
public:
    Report(std::string command, const Globals& g) : command_(std::move(command)), globals_(g) {
        j_["tool"] = "dart";
        j_["version"] = kVersion;
        j_["command"] = command_;
        j_["config"] = {{"seed", g.seed}, {"out", g.out}, {"jobs", g.jobs}};
        j_["results"] = ordered_json::object();
        j_["verifications"] = ordered_json::object();
    }

    ordered_json& config() { return j_["config"]; }
    ordered_json& results() { return j_["results"]; }
    ordered_json& wallclock() { return wallclock_; }

    void verify(const std::string& name, bool ok) { j_["verifications"][name] = ok; }

    bool passed() const {
        for (const auto& [k, v] : j_["verifications"].items()) {
            if (!v.get<bool>()) return false;
        }
        return true;
    }

    std::filesystem::path artifact(const std::string& name) const {
        std::filesystem::create_directories(globals_.out);
        return std::filesystem::path(globals_.out) / name;
    }

    /// Writes <out>/<command>.report.json and prints the verdicts.
    int finish(std::ostream& out) {
        j_["passed"] = passed();
        wallclock_["elapsed_ms"] =
            std::chrono::duration<double, std::milli>(Clock::now() - start_).count();
        ordered_json full = j_;
        full["wallclock"] = wallclock_;
        const auto path = artifact(command_ + ".report.json");
        std::ofstream os(path);
        if (!os) throw std::runtime_error("cannot write " + path.string());
        os << full.dump(2) << '\n';
        for (const auto& [k, v] : j_["verifications"].items()) {
            out << (v.get<bool>() ? "ok    " : "FAIL  ") << k << '\n';
        }
        out << "report: " << path.string() << '\n';
        return passed() ? 0 : 1;
    }

private:
    std::string command_;
    Globals globals_;
    ordered_json j_;
    ordered_json wallclock_ = ordered_json::object();
    Clock::time_point start_ = Clock::now();
};

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text << '\n';
}

DetectorModel toy_model(const std::string& model_path, std::uint64_t seed) {
    if (!model_path.empty()) return load_model(model_path);
    ModelConfig c;
    c.seed = seed;
    return build_model(c);
}

/// First `n` scene labels, extended with class7, class8, ... past the list.
std::vector<std::string> class_list(std::size_t n) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(i < scene_labels().size() ? scene_labels()[i] : "class" + std::to_string(i + 1));
    }
    return out;
}

TimingProfile pick_profile(const std::string& preset, const std::string& profile_file) {
    if (!preset.empty() && !profile_file.empty()) {
        throw UsageError("--preset and --profile are mutually exclusive");
    }
    if (!profile_file.empty()) return load_profile_file(profile_file);
    return load_preset(preset.empty() ? "paper-trt-1008" : preset);
}

PipelineLevel parse_level(const std::string& name) {
    try {
        return pipeline_level_from_string(name);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
}

std::optional<double> table_value(const ClassTable& t, std::size_t n) {
    for (const auto& [k, v] : t) {
        if (k == n) return v;
    }
    return std::nullopt;
}

ordered_json opt_json(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(); }

// ---------------------------------------------------------------------------
// detect

struct DetectArgs {
    std::string classes;
    std::string level = "batched";
    std::size_t nmax = 0;
    std::size_t scenes = 1;
    bool verify = false;
    bool cross_class = false;
    double score = 0.45, presence = 0.5, nms = 0.5;
    std::string model;
};

int cmd_detect(const Globals& g, const DetectArgs& a, std::ostream& out) {
    const auto names = split_list(a.classes);
    if (names.empty()) throw UsageError("--classes needs at least one class name");
    if (a.scenes == 0) throw UsageError("--scenes must be at least 1");
    PipelineConfig cfg = PipelineConfig::for_level(parse_level(a.level));
    if (a.nmax) cfg.n_max = a.nmax;
    cfg.score_threshold = a.score;
    cfg.presence_threshold = a.presence;
    cfg.nms_iou_threshold = a.nms;
    cfg.cross_class_nms = a.cross_class;
    cfg.validate();
    const DetectorModel model = toy_model(a.model, g.seed);

    Report rep("detect", g);
    rep.config().update({{"classes", names},
                         {"level", a.level},
                         {"nmax", a.nmax ? ordered_json(a.nmax) : ordered_json("unlimited")},
                         {"scenes", a.scenes},
                         {"verify", a.verify},
                         {"cross_class_nms", a.cross_class},
                         {"score_threshold", a.score},
                         {"presence_threshold", a.presence},
                         {"nms_threshold", a.nms},
                         {"model", a.model.empty() ? ordered_json("toy") : ordered_json(a.model)}});

    RunContext ctx;
    ordered_json scenes = ordered_json::array();
    bool all_equal = true;
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 0; i < a.scenes; ++i) {
        const SceneParams params{g.seed + i};
        const Scene scene = render_scene(params);
        const auto dets = run_pipeline(model, scene.image, names, cfg, ctx);
        ordered_json s;
        s["scene_seed"] = params.seed;
        s["planted"] = ordered_json::array();
        for (const auto& r : scene.rects) s["planted"].push_back({{"label", r.label}, {"box", r.box}});
        s["detections"] = ordered_json::parse(detections_to_json(dets));
        if (a.verify) {
            PipelineConfig ref = PipelineConfig::for_level(PipelineLevel::Naive);
            ref.backbone_mode = cfg.backbone_mode;
            ref.encdec_mode = cfg.encdec_mode;
            ref.score_threshold = cfg.score_threshold;
            ref.presence_threshold = cfg.presence_threshold;
            ref.nms_iou_threshold = cfg.nms_iou_threshold;
            ref.cross_class_nms = cfg.cross_class_nms;
            RunContext ref_ctx;
            const bool eq = bitwise_equal(dets, run_naive(model, scene.image, names, ref, ref_ctx));
            all_equal = all_equal && eq;
            s["verdict"] = std::string("bitwise-equal: ") + (eq ? "true" : "false");
        }
        for (const auto& d : dets) {
            rows.push_back({std::to_string(params.seed), d.class_name, fmt(d.score, 3), fmt(d.box[0], 3),
                            fmt(d.box[1], 3), fmt(d.box[2], 3), fmt(d.box[3], 3)});
        }
        scenes.push_back(s);
    }
    rep.results()["scenes"] = scenes;
    rep.results()["instrumentation"] = {{"backbone_calls", ctx.backbone_calls},
                                        {"encdec_passes", ctx.encdec_passes},
                                        {"mask_calls", ctx.mask_calls},
                                        {"text_cache_hits", ctx.text_cache.hits()}};
    if (a.verify) {
        rep.results()["verdict"] = std::string("bitwise-equal: ") + (all_equal ? "true" : "false");
        rep.verify("bitwise-equal-to-naive", all_equal);
    }
    write_text(rep.artifact("detections.json"), scenes.dump(2));

    print_table(out, {"scene", "class", "score", "cx", "cy", "w", "h"}, rows);
    out << "enc-dec passes: " << ctx.encdec_passes << ", backbone calls: " << ctx.backbone_calls << '\n';
    if (a.verify) out << "bitwise-equal: " << (all_equal ? "true" : "false") << '\n';
    return rep.finish(out);
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
    std::string preset, profile;
    bool measure = false;
    std::size_t classes = 0;  // 0: profile default
    std::string level;
    bool verify = false;
    std::size_t warmup = 10, frames = 100, runs = 5;
    std::string model;
};

int bench_preset(const Globals& g, const BenchArgs& a, std::ostream& out) {
    TimingProfile p = pick_profile(a.preset, a.profile);
    std::size_t n = a.classes ? a.classes : (p.observed.classes ? p.observed.classes : 1);

    Report rep("bench", g);
    rep.config().update({{"mode", "preset"},
                         {"profile", p.name},
                         {"classes", n},
                         {"level", a.level.empty() ? "all" : a.level},
                         {"verify", a.verify}});
    rep.results()["profile"] = ordered_json::parse(profile_to_json(p));

    // Pipelining overhead is not a stage timing; fit it to the observed level
    // when the profile carries one.
    std::optional<double> calibrated;
    const auto obs_pipe = p.observed.level_ms.find(to_string(LatencyLevel::Pipelined));
    if (p.compiled && obs_pipe != p.observed.level_ms.end() && n == p.observed.classes) {
        calibrated = calibrate_overhead_ms(*p.compiled, n, obs_pipe->second);
        p.compiled->overhead = *calibrated;
    }
    rep.results()["calibrated_overhead_ms"] = opt_json(calibrated);

    std::vector<LatencyLevel> levels;
    if (a.level.empty()) {
        for (auto l : kAllLatencyLevels) {
            const bool needs_compiled = l == LatencyLevel::CompiledBackbone || l == LatencyLevel::Sequential ||
                                        l == LatencyLevel::Pipelined;
            if (!needs_compiled || p.compiled) levels.push_back(l);
        }
    } else {
        levels.push_back(latency_level_from_string(a.level));
    }
    ordered_json lat = ordered_json::array();
    std::vector<std::vector<std::string>> rows;
    for (auto l : levels) {
        const double ms = latency_level(p, l, n);
        const auto it = p.observed.level_ms.find(to_string(l));
        const bool has_obs = it != p.observed.level_ms.end() && n == p.observed.classes;
        const double obs = has_obs ? it->second : 0.0;
        lat.push_back({{"level", to_string(l)}, {"ms", ms}, {"fps", 1000.0 / ms},
                       {"observed_ms", has_obs ? ordered_json(obs) : ordered_json()}});
        rows.push_back({to_string(l), fmt(ms, 1), fmt(1000.0 / ms, 1), has_obs ? fmt(obs, 1) : "-"});
        if (a.verify && has_obs) {
            rep.verify(std::string("latency.") + to_string(l), std::abs(ms - obs) <= 1e-9 * obs);
        }
    }
    rep.results()["latency"] = lat;
    out << p.name << ", " << n << " classes\n";
    print_table(out, {"level", "ms", "fps", "observed_ms"}, rows);
    if (calibrated) out << "calibrated pipelining overhead: " << fmt(*calibrated, 3) << " ms\n";

    // Per-class-count table for profiles transcribed from a sweep.
    const auto& sum_rows = p.observed.sum_ms.empty() ? p.observed.seq_fps : p.observed.sum_ms;
    if (!sum_rows.empty() && p.compiled) {
        const StageTimings& c = *p.compiled;
        ordered_json table = ordered_json::array();
        std::vector<std::vector<std::string>> trows;
        bool sum_ok = true, seq_ok = true, bound_ok = true;
        for (const auto& [k, unused] : sum_rows) {
            (void)unused;
            const double sum = latency_level(p, LatencyLevel::Sequential, k);
            const double seq = 1000.0 / sum;
            const double bound = pipelined_fps_bound(c, k);
            const auto o_sum = table_value(p.observed.sum_ms, k);
            const auto o_seq = table_value(p.observed.seq_fps, k);
            const auto o_pipe = table_value(p.observed.pipe_fps, k);
            table.push_back({{"classes", k},
                             {"sum_ms", sum},
                             {"seq_fps", seq},
                             {"pipe_bound_fps", bound},
                             {"observed_sum_ms", opt_json(o_sum)},
                             {"observed_seq_fps", opt_json(o_seq)},
                             {"observed_pipe_fps", opt_json(o_pipe)}});
            trows.push_back({std::to_string(k), fmt(sum, 1), fmt(seq, 1), fmt(bound, 1),
                             o_sum ? fmt(*o_sum, 1) : "-", o_seq ? fmt(*o_seq, 1) : "-",
                             o_pipe ? fmt(*o_pipe, 1) : "-"});
            // Cells are compared at the one-decimal precision they were published with.
            if (o_sum) sum_ok = sum_ok && std::abs(round1(sum) - *o_sum) <= 0.1 + 1e-9;
            if (o_seq) seq_ok = seq_ok && std::abs(round1(seq) - *o_seq) <= 0.1 + 1e-9;
            if (o_pipe) bound_ok = bound_ok && bound >= *o_pipe;
        }
        rep.results()["class_sweep"] = table;
        print_table(out, {"N", "sum_ms", "seq_fps", "pipe_bound", "obs_sum", "obs_seq", "obs_pipe"}, trows);
        if (a.verify) {
            if (!p.observed.sum_ms.empty()) rep.verify("sweep.sum_ms", sum_ok);
            if (!p.observed.seq_fps.empty()) rep.verify("sweep.seq_fps", seq_ok);
            if (!p.observed.pipe_fps.empty()) rep.verify("sweep.bound_ge_observed", bound_ok);
        }
    }
    return rep.finish(out);
}

int bench_measure(const Globals& g, const BenchArgs& a, std::ostream& out) {
    if (a.frames == 0 || a.runs == 0) throw UsageError("--frames and --runs must be at least 1");
    const std::size_t n = a.classes ? a.classes : 1;
    const std::string level_name = a.level.empty() ? "batched" : a.level;
    const PipelineConfig cfg = PipelineConfig::for_level(parse_level(level_name));
    const DetectorModel model = toy_model(a.model, g.seed);
    const auto names = class_list(n);
    const Tensor image = render_scene(SceneParams{g.seed}).image;

    Report rep("bench", g);
    rep.config().update({{"mode", "measure"},
                         {"classes", n},
                         {"level", level_name},
                         {"warmup", a.warmup},
                         {"frames", a.frames},
                         {"runs", a.runs},
                         {"model", a.model.empty() ? ordered_json("toy") : ordered_json(a.model)}});

    RunContext ctx;
    std::size_t detections = 0;
    for (std::size_t i = 0; i < a.warmup; ++i) detections = run_pipeline(model, image, names, cfg, ctx).size();
    std::vector<double> means;
    for (std::size_t r = 0; r < a.runs; ++r) {
        const auto t0 = Clock::now();
        for (std::size_t f = 0; f < a.frames; ++f) detections = run_pipeline(model, image, names, cfg, ctx).size();
        means.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count() /
                        static_cast<double>(a.frames));
    }
    double mean = 0.0, var = 0.0;
    for (double m : means) mean += m / static_cast<double>(means.size());
    for (double m : means) var += (m - mean) * (m - mean) / static_cast<double>(means.size());
    const double stddev = std::sqrt(var);

    rep.results()["detections_per_frame"] = detections;
    rep.results()["runs_recorded"] = means.size();
    // Timings are host dependent and live with the other wall-clock fields.
    rep.wallclock()["measurement"] = {{"run_mean_ms", means}, {"mean_ms", mean}, {"stddev_ms", stddev},
                                      {"fps", mean > 0.0 ? 1000.0 / mean : 0.0}};
    std::vector<std::vector<std::string>> rows;
    for (std::size_t r = 0; r < means.size(); ++r) rows.push_back({std::to_string(r + 1), fmt(means[r], 3)});
    print_table(out, {"run", "ms/frame"}, rows);
    out << "mean " << fmt(mean, 3) << " ms, stddev " << fmt(stddev, 3) << " ms\n";
    return rep.finish(out);
}

// ---------------------------------------------------------------------------
// prune

struct PruneArgs {
    std::size_t k = 4;
    std::size_t calib = 8;
    bool memoized = false;
    std::string protect;  // empty: the model's global blocks
    bool attn_only = false;
    bool verify = false;
    std::string model;
};

int cmd_prune(const Globals& g, const PruneArgs& a, std::ostream& out) {
    const DetectorModel model = toy_model(a.model, g.seed);
    const auto calib = default_calibration(a.calib, model.config.image_size);
    PruneOptions opt;
    if (!a.protect.empty()) {
        const auto v = split_sizes(a.protect);
        opt.protected_blocks = std::set<std::size_t>(v.begin(), v.end());
    }
    opt.protect_attn_only = a.attn_only;
    opt.memoized = a.memoized;
    opt.jobs = g.jobs;

    Report rep("prune", g);
    rep.config().update({{"k", a.k},
                         {"calibration_images", a.calib},
                         {"memoized", a.memoized},
                         {"protect", a.protect.empty() ? ordered_json("global-blocks") : ordered_json(a.protect)},
                         {"protect_attn_only", a.attn_only},
                         {"verify", a.verify},
                         {"model", a.model.empty() ? ordered_json("toy") : ordered_json(a.model)}});

    const PruningPlan plan = greedy_prune(model, calib, a.k, opt);
    const std::string plan_text = plan_to_json(plan);
    write_text(rep.artifact("plan.json"), plan_text);
    rep.results()["plan"] = ordered_json::parse(plan_text);
    rep.results()["candidates"] =
        prune_candidates(model, plan.protected_blocks, plan.protect_attn_only).size();

    bool clean = plan.steps.size() == a.k;
    try {
        (void)apply_plan(model, plan);
    } catch (const std::invalid_argument&) {
        clean = false;
    }
    rep.verify("plan.k_steps_outside_protected_blocks", clean);
    if (a.verify) {
        PruneOptions ref = opt;
        ref.memoized = false;
        ref.jobs = 1;
        const PruningPlan full = greedy_prune(model, calib, a.k, ref);
        rep.verify("plan.equals_unmemoized_single_job", plan_to_json(full) == plan_text);
    }

    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 0; i < plan.steps.size(); ++i) {
        rows.push_back({std::to_string(i + 1), to_string(plan.steps[i].id), fmt(plan.steps[i].delta, 6)});
    }
    print_table(out, {"step", "removed", "loss"}, rows);
    return rep.finish(out);
}

// ---------------------------------------------------------------------------
// precision

struct PrecisionArgs {
    std::size_t seeds = 1;
    std::size_t images = 5;
    std::string depths = "2,4,8";
    bool verify = false;
};

int cmd_precision(const Globals& g, const PrecisionArgs& a, std::ostream& out) {
    const auto depths = split_sizes(a.depths);
    if (a.seeds == 0) throw UsageError("--seeds must be at least 1");
    const auto images = synthetic_images(100, a.images);

    Report rep("precision", g);
    rep.config().update({{"seeds", a.seeds}, {"images", a.images}, {"depths", depths}, {"verify", a.verify}});

    // [depth][mode] sums over seeds; acc16 < acc32 counted per seed.
    std::vector<std::array<double, 2>> mean(depths.size(), {0.0, 0.0});
    std::vector<std::array<double, 2>> worst(depths.size(), {1.0, 1.0});
    std::size_t ordered = 0, monotone = 0;
    ordered_json per_seed = ordered_json::array();
    for (std::size_t s = 0; s < a.seeds; ++s) {
        ModelConfig c;
        c.seed = g.seed + s;
        const auto rows = precision_study(build_model(c), images, depths);
        bool seed_ordered = true, seed_monotone = true;
        ordered_json js = ordered_json::array();
        for (std::size_t d = 0; d < depths.size(); ++d) {
            const auto& r32 = rows[2 * d];
            const auto& r16 = rows[2 * d + 1];
            mean[d][0] += r32.mean_cosine / static_cast<double>(a.seeds);
            mean[d][1] += r16.mean_cosine / static_cast<double>(a.seeds);
            worst[d][0] = std::min(worst[d][0], r32.min_cosine);
            worst[d][1] = std::min(worst[d][1], r16.min_cosine);
            seed_ordered = seed_ordered && r16.mean_cosine < r32.mean_cosine;
            if (d > 0) seed_monotone = seed_monotone && r16.mean_cosine <= rows[2 * d - 1].mean_cosine;
            js.push_back({{"depth", depths[d]}, {"fp16_acc32", r32.mean_cosine}, {"fp16_acc16", r16.mean_cosine}});
        }
        ordered += seed_ordered;
        monotone += seed_monotone;
        per_seed.push_back({{"model_seed", c.seed}, {"rows", js}, {"acc16_below_acc32", seed_ordered}});
    }

    ordered_json table = ordered_json::array();
    std::vector<std::vector<std::string>> rows;
    bool acc32_ok = true, mean_ordered = true, mean_monotone = true;
    for (std::size_t d = 0; d < depths.size(); ++d) {
        table.push_back({{"depth", depths[d]},
                         {"fp16_acc32_mean_cosine", mean[d][0]},
                         {"fp16_acc16_mean_cosine", mean[d][1]},
                         {"fp16_acc32_min_cosine", worst[d][0]},
                         {"fp16_acc16_min_cosine", worst[d][1]}});
        rows.push_back({std::to_string(depths[d]), fmt(mean[d][0], 9), fmt(mean[d][1], 9),
                        fmt(1.0 - mean[d][0], 10), fmt(1.0 - mean[d][1], 10)});
        acc32_ok = acc32_ok && worst[d][0] >= 0.99;
        mean_ordered = mean_ordered && mean[d][1] < mean[d][0];
        if (d > 0) mean_monotone = mean_monotone && mean[d][1] <= mean[d - 1][1];
    }
    rep.results()["table"] = table;
    rep.results()["seeds_acc16_below_acc32"] = ordered;
    rep.results()["seeds_acc16_monotone_in_depth"] = monotone;
    rep.results()["per_seed"] = per_seed;
    print_table(out, {"depth", "cos acc32", "cos acc16", "1-cos acc32", "1-cos acc16"}, rows);
    out << "acc16 below acc32 in " << ordered << "/" << a.seeds << " seeds\n";
    if (a.verify) {
        rep.verify("acc32_cosine_at_least_0.99", acc32_ok);
        rep.verify("acc16_mean_below_acc32_mean", mean_ordered);
        rep.verify("acc16_mean_non_increasing_in_depth", mean_monotone);
        rep.verify("acc16_below_acc32_in_90pct_of_seeds", ordered * 10 >= a.seeds * 9);
    }
    return rep.finish(out);
}

// ---------------------------------------------------------------------------
// schedule

struct ScheduleArgs {
    std::string preset, profile;
    std::size_t classes = 4;
    std::size_t frames = 100;
    std::optional<double> overhead;
    bool calibrate = false;
    bool verify = false;
};

int cmd_schedule(const Globals& g, const ScheduleArgs& a, std::ostream& out) {
    const TimingProfile p = pick_profile(a.preset, a.profile);
    StageTimings stages = p.pipeline_stages();
    if (a.calibrate && a.overhead) throw UsageError("--calibrate and --overhead are mutually exclusive");
    if (a.overhead) stages.overhead = *a.overhead;
    if (a.calibrate) {
        const auto fps = table_value(p.observed.pipe_fps, a.classes);
        if (!fps) throw UsageError("profile '" + p.name + "' has no observed pipelined FPS for " +
                                   std::to_string(a.classes) + " classes");
        stages.overhead = calibrate_overhead(stages, a.classes, *fps);
    }

    Report rep("schedule", g);
    rep.config().update({{"profile", p.name},
                         {"classes", a.classes},
                         {"frames", a.frames},
                         {"overhead_ms", stages.overhead},
                         {"calibrate", a.calibrate},
                         {"verify", a.verify}});

    const ScheduleTrace trace = simulate_pipeline(stages, a.classes, a.frames);
    const double bound = pipelined_fps_bound(stages, a.classes);
    const auto observed = table_value(p.observed.pipe_fps, a.classes);
    rep.results()["t_bb_ms"] = stages.t_bb;
    rep.results()["t_ed_ms"] = stages.t_ed_at(a.classes);
    rep.results()["steady_state_ms"] = trace.steady_state_ms;
    rep.results()["makespan_ms"] = trace.makespan;
    rep.results()["simulated_fps"] = trace.fps;
    rep.results()["bound_fps"] = bound;
    rep.results()["observed_pipe_fps"] = opt_json(observed);

    ordered_json sweep = ordered_json::array();
    std::vector<std::vector<std::string>> rows;
    bool sweep_ok = true;
    for (const auto& [k, unused] : stages.t_ed) {
        (void)unused;
        const auto t = simulate_pipeline(stages, k, a.frames);
        const double b = pipelined_fps_bound(stages, k);
        const auto o = table_value(p.observed.pipe_fps, k);
        sweep.push_back({{"classes", k}, {"bound_fps", b}, {"simulated_fps", t.fps}, {"observed_pipe_fps", opt_json(o)}});
        rows.push_back({std::to_string(k), fmt(b, 1), fmt(t.fps, 1), o ? fmt(*o, 1) : "-"});
        if (o) sweep_ok = sweep_ok && b >= *o;
    }
    rep.results()["fps_vs_classes"] = sweep;

    ordered_json frames = ordered_json::array();
    for (const auto& f : trace.frames) frames.push_back({f.bb_start, f.bb_end, f.ed_start, f.ed_end});
    write_text(rep.artifact("trace.json"),
               ordered_json({{"columns", {"bb_start", "bb_end", "ed_start", "ed_end"}}, {"frames", frames}}).dump());

    out << p.name << ", " << a.classes << " classes, " << a.frames << " frames, overhead "
        << fmt(stages.overhead, 3) << " ms\n";
    out << "steady-state bound " << fmt(bound, 1) << " FPS, simulated " << fmt(trace.fps, 1) << " FPS";
    if (observed) out << ", observed " << fmt(*observed, 1) << " FPS";
    out << '\n';
    print_table(out, {"N", "bound_fps", "sim_fps", "observed"}, rows);

    rep.verify("trace.valid", trace_is_valid(trace));
    rep.verify("simulated_fps_within_bound", trace.fps <= bound * (1.0 + 1e-9));
    if (a.verify) rep.verify("bound_ge_observed", sweep_ok);
    return rep.finish(out);
}

// ---------------------------------------------------------------------------
// distill

struct DistillArgs {
    bool plant = false;
    std::string method = "closed-form";
    double lambda = 1e-6;
    std::size_t steps = 2000;
    std::size_t train = 16;
    std::size_t eval = 8;
    std::string classes;
    bool verify = false;
};

double max_abs_diff(const Adapter& a, const Adapter& b) {
    double err = 0.0;
    for (std::size_t l = 0; l < 3; ++l) {
        for (auto [x, y] : {std::pair{&a.levels[l].weight, &b.levels[l].weight},
                            std::pair{&a.levels[l].bias, &b.levels[l].bias}}) {
            for (std::size_t i = 0; i < x->size(); ++i) err = std::max(err, std::abs((*x)[i] - (*y)[i]));
        }
    }
    return err;
}

ordered_json curve_json(const std::vector<double>& curve) {
    // Every 100th value plus the last keeps reports readable.
    ordered_json out = ordered_json::array();
    for (std::size_t i = 0; i < curve.size(); ++i) {
        if (i % 100 == 0 || i + 1 == curve.size()) out.push_back({i, curve[i]});
    }
    return out;
}

int cmd_distill(const Globals& g, const DistillArgs& a, std::ostream& out) {
    if (a.method != "closed-form" && a.method != "gd") {
        throw UsageError("--method must be closed-form or gd");
    }
    Report rep("distill", g);
    rep.config().update({{"plant", a.plant},
                         {"method", a.method},
                         {"lambda", a.lambda},
                         {"steps", a.steps},
                         {"verify", a.verify}});
    GdOptions gd;
    gd.steps = a.steps;

    if (a.plant) {
        const auto p = planted_problem(g.seed, a.train, {64, 16, 4}, {32, 32, 32}, {64, 64, 64});
        rep.config()["train_images"] = a.train;
        const Adapter cf = fit_adapter_closed_form(p.student, p.teacher, 1e-10);
        const Adapter gdf = fit_adapter_gd(p.student, p.teacher, gd);
        const double cf_err = max_abs_diff(cf, p.truth), gd_err = max_abs_diff(gdf, p.truth);
        rep.results()["closed_form"] = {{"lambda", 1e-10}, {"max_abs_error", cf_err}, {"loss", cf.meta.final_loss}};
        rep.results()["gd"] = {{"steps", a.steps}, {"step_size", gdf.meta.step_size},
                               {"max_abs_error", gd_err}, {"loss", gdf.meta.final_loss},
                               {"loss_curve", curve_json(gdf.loss_curve)}};
        save_adapter(a.method == "gd" ? gdf : cf, rep.artifact("adapter.bin"));
        print_table(out, {"fit", "max |err|", "loss"},
                    {{"closed-form", fmt(cf_err, 12), fmt(cf.meta.final_loss, 12)},
                     {"gd", fmt(gd_err, 12), fmt(gdf.meta.final_loss, 12)}});
        rep.verify("planted.closed_form_within_1e-3", cf_err < 1e-3);
        rep.verify("planted.gd_within_1e-3", gd_err < 1e-3);
        return rep.finish(out);
    }

    auto names = split_list(a.classes);
    if (names.empty()) names = scene_labels();
    rep.config().update({{"train_images", a.train}, {"eval_images", a.eval}, {"classes", names}});
    ModelConfig tc;
    tc.seed = g.seed;
    const DetectorModel teacher = build_model(tc);
    const DetectorModel student = build_model(default_student_config(tc, g.seed + 1));
    const auto train = synthetic_images(2000 + 100 * g.seed, a.train);
    const auto held = synthetic_images(5000 + 100 * g.seed, a.eval);

    const auto sf = extract_features(student, train, g.jobs);
    const auto tf = extract_features(teacher, train, g.jobs);
    gd.lambda = a.lambda;
    const Adapter adapter =
        a.method == "gd" ? fit_adapter_gd(sf, tf, gd) : fit_adapter_closed_form(sf, tf, a.lambda);
    save_adapter(adapter, rep.artifact("adapter.bin"));
    const Adapter baseline = random_adapter({32, 32, 32}, {64, 64, 64}, g.seed);
    const PipelineConfig cfg = PipelineConfig::for_level(PipelineLevel::BatchedDetOnly);
    const AgreementReport trained = evaluate_agreement(teacher, student, adapter, held, names, cfg);
    const AgreementReport random = evaluate_agreement(teacher, student, baseline, held, names, cfg);

    auto agreement_json = [](const AgreementReport& r) {
        return ordered_json{{"agreement", r.agreement},
                            {"teacher_detections", r.teacher_detections},
                            {"matched", r.matched},
                            {"student_detections", r.student_detections},
                            {"level_cosine", r.level_cosine}};
    };
    rep.results()["adapter"] = {{"method", adapter.meta.method},
                                {"parameters", adapter.parameter_count()},
                                {"train_loss", adapter.meta.final_loss},
                                {"random_train_loss", distill_loss(baseline, sf, tf)}};
    if (a.method == "gd") {
        rep.results()["adapter"]["step_size"] = adapter.meta.step_size;
        rep.results()["adapter"]["loss_curve"] = curve_json(adapter.loss_curve);
    }
    rep.results()["trained"] = agreement_json(trained);
    rep.results()["random"] = agreement_json(random);
    rep.results()["encdec_checksum"] = {{"before", hex64(trained.encdec_checksum_before)},
                                        {"after", hex64(trained.encdec_checksum_after)}};

    print_table(out, {"adapter", "agreement", "matched", "cos l0", "cos l1", "cos l2"},
                {{a.method, fmt(trained.agreement, 3),
                  std::to_string(trained.matched) + "/" + std::to_string(trained.teacher_detections),
                  fmt(trained.level_cosine[0], 4), fmt(trained.level_cosine[1], 4), fmt(trained.level_cosine[2], 4)},
                 {"random", fmt(random.agreement, 3),
                  std::to_string(random.matched) + "/" + std::to_string(random.teacher_detections),
                  fmt(random.level_cosine[0], 4), fmt(random.level_cosine[1], 4), fmt(random.level_cosine[2], 4)}});
    rep.verify("encdec_frozen", trained.encdec_checksum_before == trained.encdec_checksum_after &&
                                    random.encdec_checksum_before == random.encdec_checksum_after);
    if (a.verify) rep.verify("trained_agreement_ge_random", trained.agreement >= random.agreement);
    return rep.finish(out);
}

std::uint64_t default_seed() {
    const char* env = std::getenv("DART_SEED");
    if (!env || !*env) return 0;
    try {
        return std::stoull(env);
    } catch (const std::exception&) {
        throw UsageError(std::string("DART_SEED='") + env + "' is not a non-negative integer");
    }
}

}  // namespace

std::string report_payload(const std::string& report_text) {
    auto j = ordered_json::parse(report_text);
    j.erase("wallclock");
    return j.dump(2);
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"dart: promptable detector inference toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "", "TOML/INI file supplying defaults for any flag (flags win)");
    app.set_version_flag("--version", kVersion);

    Globals g;
    try {
        g.seed = default_seed();
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
    app.add_option("--seed", g.seed, "Global seed (default: $DART_SEED or 0)");
    app.add_option("--out", g.out, "Directory for reports and artifacts")->capture_default_str();
    app.add_option("--jobs", g.jobs, "Worker threads for pruning and feature extraction")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();

    DetectArgs da;
    auto* detect = app.add_subcommand("detect", "Run a pipeline level on synthetic scenes");
    detect->add_option("--classes", da.classes, "Comma-separated class prompts")->required();
    detect->add_option("--level", da.level, "naive, shared, batched or batched-fp16")->capture_default_str();
    detect->add_option("--nmax", da.nmax, "Classes per enc-dec pass (0: all)")->capture_default_str();
    detect->add_option("--scenes", da.scenes, "Number of synthetic scenes")->capture_default_str();
    detect->add_flag("--verify", da.verify, "Compare against the naive per-class loop");
    detect->add_flag("--cross-class-nms", da.cross_class, "Suppress overlaps across classes");
    detect->add_option("--score-threshold", da.score)->capture_default_str();
    detect->add_option("--presence-threshold", da.presence)->capture_default_str();
    detect->add_option("--nms-threshold", da.nms)->capture_default_str();
    detect->add_option("--model", da.model, "Model file (default: toy model from --seed)");

    BenchArgs ba;
    auto* bench = app.add_subcommand("bench", "Latency tables from a timing profile, or measured toy timings");
    bench->add_option("--preset", ba.preset, "Built-in timing profile");
    bench->add_option("--profile", ba.profile, "Timing profile JSON file");
    bench->add_flag("--measure", ba.measure, "Time the toy model instead of using a profile");
    bench->add_option("--classes", ba.classes, "Class count (default: profile's own)");
    bench->add_option("--level", ba.level, "Single level to report");
    bench->add_flag("--verify", ba.verify, "Check against the profile's observed numbers");
    bench->add_option("--warmup", ba.warmup)->capture_default_str();
    bench->add_option("--frames", ba.frames)->capture_default_str();
    bench->add_option("--runs", ba.runs)->capture_default_str();
    bench->add_option("--model", ba.model, "Model file for --measure");

    PruneArgs pa;
    auto* prune = app.add_subcommand("prune", "Greedy sub-block pruning of the backbone");
    prune->add_option("--k", pa.k, "Sub-blocks to remove")->capture_default_str();
    prune->add_option("--calib", pa.calib, "Calibration scenes")->capture_default_str();
    prune->add_flag("--memoized", pa.memoized, "Reuse trunk prefixes across candidates");
    prune->add_option("--protect", pa.protect, "Comma-separated protected blocks (default: global blocks)");
    prune->add_flag("--protect-attn-only", pa.attn_only, "Leave the MLP of protected blocks prunable");
    prune->add_flag("--verify", pa.verify, "Re-run unmemoized on one thread and compare plans");
    prune->add_option("--model", pa.model, "Model file (default: toy model from --seed)");

    PrecisionArgs ra;
    auto* precision = app.add_subcommand("precision", "FP16 accumulation error across backbone depths");
    precision->add_option("--seeds", ra.seeds, "Model seeds, starting at --seed")->capture_default_str();
    precision->add_option("--images", ra.images)->capture_default_str();
    precision->add_option("--depths", ra.depths)->capture_default_str();
    precision->add_flag("--verify", ra.verify, "Check the degradation ordering");

    ScheduleArgs sa;
    auto* schedule = app.add_subcommand("schedule", "Simulate the two-stage frame pipeline");
    schedule->add_option("--preset", sa.preset, "Built-in timing profile");
    schedule->add_option("--profile", sa.profile, "Timing profile JSON file");
    schedule->add_option("--classes", sa.classes)->capture_default_str();
    schedule->add_option("--frames", sa.frames)->capture_default_str();
    schedule->add_option("--overhead", sa.overhead, "Per-frame pipelining overhead in ms");
    schedule->add_flag("--calibrate", sa.calibrate, "Fit the overhead to the observed pipelined FPS");
    schedule->add_flag("--verify", sa.verify, "Check bound >= observed for every class count");

    DistillArgs xa;
    auto* distill = app.add_subcommand("distill", "Fit a feature adapter behind the frozen enc-dec");
    distill->add_flag("--plant", xa.plant, "Recover a planted affine map instead");
    distill->add_option("--method", xa.method, "closed-form or gd")->capture_default_str();
    distill->add_option("--lambda", xa.lambda, "Ridge penalty on adapter weights")->capture_default_str();
    distill->add_option("--steps", xa.steps, "Gradient steps")->capture_default_str();
    distill->add_option("--train-images", xa.train)->capture_default_str();
    distill->add_option("--eval-images", xa.eval)->capture_default_str();
    distill->add_option("--classes", xa.classes, "Comma-separated prompts (default: scene labels)");
    distill->add_flag("--verify", xa.verify, "Require trained agreement >= random-adapter agreement");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (detect->parsed()) return cmd_detect(g, da, out);
        if (bench->parsed()) return ba.measure ? bench_measure(g, ba, out) : bench_preset(g, ba, out);
        if (prune->parsed()) return cmd_prune(g, pa, out);
        if (precision->parsed()) return cmd_precision(g, ra, out);
        if (schedule->parsed()) return cmd_schedule(g, sa, out);
        if (distill->parsed()) return cmd_distill(g, xa, out);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}

}  // namespace dart
