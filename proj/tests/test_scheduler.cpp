#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "dart/scheduler.hpp"
#include "doctest.h"

using namespace dart;

namespace {

double round1(double x) { return std::round(x * 10.0) / 10.0; }

StageTimings stages(double t_bb, ClassTable t_ed, double overhead = 0.0) {
    StageTimings s;
    s.t_bb = t_bb;
    s.t_ed = std::move(t_ed);
    s.overhead = overhead;
    return s;
}

}  // namespace

TEST_CASE("hierarchy latencies of the 1008px eager profile") {
    const auto p = load_preset("paper-pytorch-1008");
    CHECK(latency_level(p, LatencyLevel::Naive, 3) == 336.0);
    CHECK(latency_level(p, LatencyLevel::Shared, 3) == 162.0);
    CHECK(latency_level(p, LatencyLevel::Batched, 3) == 112.0);
    CHECK(latency_level(p, LatencyLevel::CompiledBackbone, 3) == 78.0);
    CHECK(latency_level(p, LatencyLevel::Sequential, 3) == 68.0);
    CHECK(latency_level(p, LatencyLevel::Pipelined, 3) == 53.0);  // overhead not yet calibrated

    auto compiled = *p.compiled;
    compiled.overhead = calibrate_overhead_ms(compiled, 3, 60.0);
    CHECK(compiled.overhead == 7.0);
    auto q = p;
    q.compiled = compiled;
    CHECK(latency_level(q, LatencyLevel::Pipelined, 3) == 60.0);
    CHECK_THROWS(latency_level(p, LatencyLevel::Naive, 0));
}

TEST_CASE("class sweep of the 1008px compiled profile") {
    const auto p = load_preset("paper-trt-1008");
    const std::vector<std::tuple<std::size_t, double, double, double>> rows{
        {1, 61.1, 16.3, 18.7}, {2, 64.6, 15.5, 17.6}, {4, 72.4, 13.8, 15.8}, {8, 87.9, 11.5, 12.5}};
    for (const auto& [n, sum, seq, pipe] : rows) {
        const double ms = latency_level(p, LatencyLevel::Sequential, n);
        CHECK(round1(ms) == doctest::Approx(sum));
        CHECK(std::abs(round1(1000.0 / ms) - seq) <= 0.1 + 1e-9);
        CHECK(pipelined_fps_bound(p.pipeline_stages(), n) >= pipe);
    }
    CHECK(round1(pipelined_fps_bound(p.pipeline_stages(), 4)) == doctest::Approx(18.8));
}

TEST_CASE("bound arithmetic") {
    CHECK(pipelined_fps_bound(stages(50, {{1, 50}}), 1) == doctest::Approx(20.0));
    CHECK(pipelined_fps_bound(stages(20, {{1, 40}}), 1) == doctest::Approx(25.0));
    CHECK_THROWS(pipelined_fps_bound(stages(0, {{1, 0}}), 1));
}

TEST_CASE("enc-dec table interpolation") {
    const auto s = stages(53.2, {{1, 7.9}, {2, 11.4}, {4, 19.2}, {8, 34.7}});
    CHECK(s.t_ed_at(2) == 11.4);
    CHECK(s.t_ed_at(3) == doctest::Approx(15.3));
    CHECK_THROWS_AS(s.t_ed_at(9), std::out_of_range);
    CHECK_THROWS_AS(stages(1, {{2, 1}}).t_ed_at(1), std::out_of_range);
    CHECK_THROWS(stages(1, {{2, 5}, {1, 1}}).validate());
    CHECK_THROWS(stages(1, {{1, 5}, {2, 1}}).validate());
    CHECK_THROWS(stages(-1, {{1, 1}}).validate());
}

TEST_CASE("simulator examples") {
    const auto t = simulate_pipeline(stages(53, {{1, 17}}), 1, 100);
    CHECK(t.steady_state_ms == doctest::Approx(53.0));
    CHECK(round1(t.fps) == doctest::Approx(18.9));
    CHECK(t.makespan == doctest::Approx(53 + 17 + 99 * 53.0));
    CHECK(trace_is_valid(t));

    const auto single = simulate_pipeline(stages(40, {{1, 0}}), 1, 10);
    CHECK(single.fps == doctest::Approx(25.0));

    const auto p = load_preset("paper-trt-1008");
    auto s = p.pipeline_stages();
    s.overhead = calibrate_overhead(s, 1, 18.7);
    CHECK(s.overhead == doctest::Approx(1000.0 / 18.7 - 53.2));
    CHECK(s.overhead == doctest::Approx(0.276).epsilon(0.01));
    CHECK(round1(simulate_pipeline(s, 1, 100).fps) == doctest::Approx(18.7));
    CHECK_THROWS(simulate_pipeline(s, 1, 0));
    CHECK_THROWS(calibrate_overhead(s, 1, 30.0));
}

TEST_CASE("simulated rate never beats the bound") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(1.0, 100.0), ov(0.0, 10.0);
    for (int i = 0; i < 200; ++i) {
        const auto s = stages(u(rng), {{1, u(rng)}}, i % 4 == 0 ? 0.0 : ov(rng));
        const auto t = simulate_pipeline(s, 1, 1 + static_cast<std::size_t>(i % 50));
        const double bound = pipelined_fps_bound(s, 1);
        CHECK(trace_is_valid(t));
        if (s.overhead == 0.0) {
            CHECK(std::abs(t.fps - bound) <= 1e-9 * bound);
        } else {
            CHECK(t.fps < bound);
        }
    }
}

TEST_CASE("broken traces are detected") {
    auto t = simulate_pipeline(stages(10, {{1, 5}}), 1, 3);
    REQUIRE(trace_is_valid(t));
    t.frames[1].ed_start = t.frames[1].bb_end - 1.0;
    CHECK_FALSE(trace_is_valid(t));
}

TEST_CASE("presets") {
    CHECK(preset_names().size() == 3);
    try {
        load_preset("nope");
        FAIL("expected an error");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("paper-trt-1008") != std::string::npos);
    }
    for (const auto& name : preset_names()) {
        const auto p = load_preset(name);
        CHECK(p.name == name);
        const auto file = load_profile_file(std::filesystem::path(DART_SOURCE_DIR) / "presets" / (name + ".json"));
        CHECK(profile_to_json(file) == profile_to_json(p));
        CHECK(profile_to_json(profile_from_json(profile_to_json(p))) == profile_to_json(p));
    }
    CHECK_THROWS(load_profile_file("/nonexistent/profile.json"));
    CHECK_THROWS(profile_from_json(R"({"name":"x","t_bb":1,"t_ed":[[2,1],[1,1]]})"));
}

TEST_CASE("level names") {
    for (auto level : kAllLatencyLevels) CHECK(latency_level_from_string(to_string(level)) == level);
    CHECK_THROWS(latency_level_from_string("warp"));
}

TEST_CASE("sequential latency never beats the pipelined period") {
    // Holds whenever the overhead is at most min(t_bb, t_ed) + t_other.
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(1.0, 100.0), frac(0.0, 1.0);
    for (int i = 0; i < 500; ++i) {
        TimingProfile p;
        p.name = "random";
        p.eager = stages(u(rng), {{1, u(rng)}});
        p.eager.t_other = u(rng) / 10;
        p.eager.overhead = frac(rng) * (std::min(p.eager.t_bb, p.eager.t_ed[0].second) + p.eager.t_other);
        p.compiled = p.eager;
        const double seq = latency_level(p, LatencyLevel::Sequential, 1);
        CHECK(seq >= simulate_pipeline(p.eager, 1, 50).steady_state_ms - 1e-9);
        CHECK(seq >= latency_level(p, LatencyLevel::Pipelined, 1) - 1e-9);
    }
}
