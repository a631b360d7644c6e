// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace dart {

/// (class count, value) pairs sorted by class count.
using ClassTable = std::vector<std::pair<std::size_t, double>>;

/// Per-stage timings of one deployment, in milliseconds.
struct StageTimings {
    double t_bb = 0.0;  // one backbone pass
    ClassTable t_ed;    // encoder-decoder pass for N classes
    double t_mask = 0.0;
    double t_other = 0.0;
    double overhead = 0.0;  // per-frame cost of pipelining the two stages

    /// Linear interpolation inside the table; extrapolation throws.
    double t_ed_at(std::size_t classes) const;
    /// Non-negative entries, strictly increasing N, non-decreasing t_ed.
    void validate() const;
};

/// Reference numbers a profile was transcribed from. Used for reporting and
/// overhead calibration only, never for computing latencies.
struct ObservedTimings {
    std::size_t classes = 0;                  // class count of level_ms
    std::map<std::string, double> level_ms;   // by latency level name
    ClassTable sum_ms, seq_fps, pipe_fps;
};

struct TimingProfile {
    std::string name;
    std::string description;
    StageTimings eager;
    std::optional<StageTimings> compiled;
    ObservedTimings observed;

    /// Timings used for pipelining: compiled when present.
    const StageTimings& pipeline_stages() const;
    void validate() const;
};

/// Cumulative levels of the latency model, including both variants of the
/// final inter-frame pipelining level.
enum class LatencyLevel { Naive, Shared, Batched, CompiledBackbone, Sequential, Pipelined };

const char* to_string(LatencyLevel level);
LatencyLevel latency_level_from_string(const std::string& name);
inline constexpr LatencyLevel kAllLatencyLevels[] = {
    LatencyLevel::Naive,      LatencyLevel::Shared,     LatencyLevel::Batched,
    LatencyLevel::CompiledBackbone, LatencyLevel::Sequential, LatencyLevel::Pipelined};

/// Analytic per-frame latency (ms) of `level` for `classes` prompts.
double latency_level(const TimingProfile& profile, LatencyLevel level, std::size_t classes);

/// 1000 / max(t_bb, t_ed(N)): the throughput ceiling of two overlapped stages.
double pipelined_fps_bound(const StageTimings& stages, std::size_t classes);

/// Overhead that makes the pipelined model hit an observed frame rate.
double calibrate_overhead(const StageTimings& stages, std::size_t classes, double observed_fps);
/// Same, from an observed per-frame latency in ms (avoids the 1000/x round trip).
double calibrate_overhead_ms(const StageTimings& stages, std::size_t classes, double observed_ms);

struct FrameTiming {
    double bb_start = 0.0, bb_end = 0.0;
    double ed_start = 0.0, ed_end = 0.0;
};

struct ScheduleTrace {
    std::vector<FrameTiming> frames;
    double makespan = 0.0;
    double steady_state_ms = 0.0;  // per-frame period once both stages are busy
    double fps = 0.0;              // 1000 / steady_state_ms
};

/// Lockstep two-stage pipeline. Tick 0 runs backbone(0) alone; tick k in
/// [1, F) runs backbone(k) and enc-dec(k-1) side by side, each paying half the
/// overhead, and lasts max(t_bb, t_ed) + overhead; the last tick runs
/// enc-dec(F-1) alone. So makespan = t_bb + t_ed + (F-1) * steady_state.
ScheduleTrace simulate_pipeline(const StageTimings& stages, std::size_t classes,
                                std::size_t num_frames);

/// Stage-reuse and dependency ordering of every frame.
bool trace_is_valid(const ScheduleTrace& trace);

/// Names of the shipped presets.
const std::vector<std::string>& preset_names();
/// Throws listing the available presets when `name` is unknown.
TimingProfile load_preset(const std::string& name);

TimingProfile profile_from_json(const std::string& text);
std::string profile_to_json(const TimingProfile& profile);
TimingProfile load_profile_file(const std::filesystem::path& path);

}  // namespace dart
