// SPDX-License-Identifier: Apache-2.0
#include "dart/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dart {

namespace detail {
const std::vector<std::pair<std::string, std::string>>& embedded_presets();
}

namespace {

using nlohmann::ordered_json;

ClassTable table_from_json(const ordered_json& j) {
    ClassTable out;
    for (const auto& row : j) out.emplace_back(row.at(0).get<std::size_t>(), row.at(1).get<double>());
    return out;
}

ordered_json table_to_json(const ClassTable& t) {
    ordered_json out = ordered_json::array();
    for (const auto& [n, v] : t) out.push_back({n, v});
    return out;
}

StageTimings stages_from_json(const ordered_json& j) {
    StageTimings s;
    s.t_bb = j.at("t_bb").get<double>();
    s.t_ed = table_from_json(j.at("t_ed"));
    s.t_mask = j.value("t_mask", 0.0);
    s.t_other = j.value("t_other", 0.0);
    s.overhead = j.value("overhead", 0.0);
    return s;
}

void stages_to_json(const StageTimings& s, ordered_json& j) {
    j["t_bb"] = s.t_bb;
    j["t_ed"] = table_to_json(s.t_ed);
    j["t_mask"] = s.t_mask;
    j["t_other"] = s.t_other;
    j["overhead"] = s.overhead;
}

const StageTimings& require_compiled(const TimingProfile& p, LatencyLevel level) {
    if (!p.compiled) {
        throw std::invalid_argument("profile '" + p.name + "' has no compiled-stage timings, needed for level " +
                                    to_string(level));
    }
    return *p.compiled;
}

}  // namespace

double StageTimings::t_ed_at(std::size_t classes) const {
    if (t_ed.empty()) throw std::invalid_argument("enc-dec timing table is empty");
    if (classes < t_ed.front().first || classes > t_ed.back().first) {
        throw std::out_of_range("enc-dec timing for " + std::to_string(classes) +
                                " classes lies outside the table range [" +
                                std::to_string(t_ed.front().first) + ", " +
                                std::to_string(t_ed.back().first) + "]; extrapolation is refused");
    }
    for (std::size_t i = 0; i < t_ed.size(); ++i) {
        if (t_ed[i].first == classes) return t_ed[i].second;
        if (t_ed[i].first > classes) {
            const auto [n0, v0] = t_ed[i - 1];
            const auto [n1, v1] = t_ed[i];
            const double f = static_cast<double>(classes - n0) / static_cast<double>(n1 - n0);
            return v0 + f * (v1 - v0);
        }
    }
    return t_ed.back().second;
}

void StageTimings::validate() const {
    auto nonneg = [](double v, const char* what) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw std::invalid_argument(std::string(what) + " must be a finite non-negative time");
        }
    };
    nonneg(t_bb, "t_bb");
    nonneg(t_mask, "t_mask");
    nonneg(t_other, "t_other");
    nonneg(overhead, "overhead");
    if (t_ed.empty()) throw std::invalid_argument("t_ed needs at least one entry");
    for (std::size_t i = 0; i < t_ed.size(); ++i) {
        nonneg(t_ed[i].second, "t_ed");
        if (t_ed[i].first == 0) throw std::invalid_argument("t_ed class counts start at 1");
        if (i > 0 && t_ed[i].first <= t_ed[i - 1].first) {
            throw std::invalid_argument("t_ed class counts must be strictly increasing");
        }
        if (i > 0 && t_ed[i].second < t_ed[i - 1].second) {
            throw std::invalid_argument("t_ed must be non-decreasing in the class count");
        }
    }
}

const StageTimings& TimingProfile::pipeline_stages() const { return compiled ? *compiled : eager; }

void TimingProfile::validate() const {
    eager.validate();
    if (compiled) compiled->validate();
}

const char* to_string(LatencyLevel level) {
    switch (level) {
        case LatencyLevel::Naive: return "naive";
        case LatencyLevel::Shared: return "shared";
        case LatencyLevel::Batched: return "batched";
        case LatencyLevel::CompiledBackbone: return "compiled-backbone";
        case LatencyLevel::Sequential: return "sequential";
        case LatencyLevel::Pipelined: return "pipelined";
    }
    return "?";
}

LatencyLevel latency_level_from_string(const std::string& name) {
    for (auto level : kAllLatencyLevels) {
        if (name == to_string(level)) return level;
    }
    throw std::invalid_argument("unknown latency level '" + name +
                                "' (expected naive, shared, batched, compiled-backbone, "
                                "sequential or pipelined)");
}

double latency_level(const TimingProfile& p, LatencyLevel level, std::size_t classes) {
    if (classes == 0) throw std::invalid_argument("latency needs at least one class");
    const auto n = static_cast<double>(classes);
    const StageTimings& e = p.eager;
    switch (level) {
        case LatencyLevel::Naive:
            return n * (e.t_bb + e.t_ed_at(1) + e.t_mask + e.t_other);
        case LatencyLevel::Shared:
            return e.t_bb + n * (e.t_ed_at(1) + e.t_mask + e.t_other);
        case LatencyLevel::Batched:
            return e.t_bb + e.t_ed_at(classes) + e.t_other;
        case LatencyLevel::CompiledBackbone:
            return require_compiled(p, level).t_bb + e.t_ed_at(classes) + e.t_other;
        case LatencyLevel::Sequential: {
            const auto& c = require_compiled(p, level);
            return c.t_bb + c.t_ed_at(classes) + c.t_other;
        }
        case LatencyLevel::Pipelined: {
            const auto& c = require_compiled(p, level);
            return std::max(c.t_bb, c.t_ed_at(classes)) + c.overhead;
        }
    }
    throw std::logic_error("unreachable latency level");
}

double pipelined_fps_bound(const StageTimings& stages, std::size_t classes) {
    const double slowest = std::max(stages.t_bb, stages.t_ed_at(classes));
    if (!(slowest > 0.0)) throw std::invalid_argument("FPS is undefined when both stage times are zero");
    return 1000.0 / slowest;
}

double calibrate_overhead_ms(const StageTimings& stages, std::size_t classes, double observed_ms) {
    if (!(observed_ms > 0.0)) throw std::invalid_argument("observed latency must be positive");
    const double overhead = observed_ms - std::max(stages.t_bb, stages.t_ed_at(classes));
    if (overhead < 0.0) {
        throw std::invalid_argument("observed " + std::to_string(observed_ms) +
                                    " ms beats the pipelining bound; no non-negative overhead fits");
    }
    return overhead;
}

double calibrate_overhead(const StageTimings& stages, std::size_t classes, double observed_fps) {
    if (!(observed_fps > 0.0)) throw std::invalid_argument("observed FPS must be positive");
    return calibrate_overhead_ms(stages, classes, 1000.0 / observed_fps);
}

ScheduleTrace simulate_pipeline(const StageTimings& stages, std::size_t classes,
                                std::size_t num_frames) {
    if (num_frames == 0) throw std::invalid_argument("simulation needs at least one frame");
    stages.validate();
    const double t_bb = stages.t_bb;
    const double t_ed = stages.t_ed_at(classes);
    const double ov = stages.overhead;
    const double tick = std::max(t_bb, t_ed) + ov;

    ScheduleTrace trace;
    trace.frames.resize(num_frames);
    trace.frames[0].bb_start = 0.0;
    trace.frames[0].bb_end = t_bb;
    double tick_start = t_bb;
    for (std::size_t k = 1; k < num_frames; ++k) {
        auto& cur = trace.frames[k];
        auto& prev = trace.frames[k - 1];
        cur.bb_start = tick_start;
        cur.bb_end = tick_start + t_bb + ov / 2;
        prev.ed_start = tick_start;
        prev.ed_end = tick_start + t_ed + ov / 2;
        tick_start += tick;
    }
    auto& last = trace.frames.back();
    last.ed_start = tick_start;
    last.ed_end = tick_start + t_ed;
    trace.makespan = last.ed_end;
    trace.steady_state_ms =
        num_frames > 1 ? (trace.makespan - t_bb - t_ed) / static_cast<double>(num_frames - 1) : tick;
    if (!(trace.steady_state_ms > 0.0)) {
        throw std::invalid_argument("FPS is undefined when both stage times are zero");
    }
    trace.fps = 1000.0 / trace.steady_state_ms;
    return trace;
}

bool trace_is_valid(const ScheduleTrace& trace) {
    for (std::size_t k = 0; k < trace.frames.size(); ++k) {
        const auto& f = trace.frames[k];
        if (f.bb_end < f.bb_start || f.ed_end < f.ed_start || f.ed_start < f.bb_end) return false;
        if (k > 0) {
            const auto& p = trace.frames[k - 1];
            if (f.bb_start < p.bb_end || f.ed_start < p.ed_end) return false;
        }
    }
    return true;
}

const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (const auto& [name, text] : detail::embedded_presets()) out.push_back(name);
        return out;
    }();
    return names;
}

TimingProfile load_preset(const std::string& name) {
    for (const auto& [preset, text] : detail::embedded_presets()) {
        if (preset == name) return profile_from_json(text);
    }
    std::string list;
    for (const auto& n : preset_names()) list += (list.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown preset '" + name + "'; available presets: " + list);
}

TimingProfile profile_from_json(const std::string& text) {
    const auto j = ordered_json::parse(text);
    TimingProfile p;
    p.name = j.value("name", "");
    p.description = j.value("description", "");
    p.eager = stages_from_json(j);
    if (j.contains("compiled")) p.compiled = stages_from_json(j.at("compiled"));
    if (j.contains("observed")) {
        const auto& o = j.at("observed");
        p.observed.classes = o.value("classes", std::size_t{0});
        if (o.contains("level_ms")) {
            for (const auto& [level, ms] : o.at("level_ms").items()) {
                latency_level_from_string(level);  // reject unknown names early
                p.observed.level_ms[level] = ms.get<double>();
            }
        }
        if (o.contains("sum_ms")) p.observed.sum_ms = table_from_json(o.at("sum_ms"));
        if (o.contains("seq_fps")) p.observed.seq_fps = table_from_json(o.at("seq_fps"));
        if (o.contains("pipe_fps")) p.observed.pipe_fps = table_from_json(o.at("pipe_fps"));
    }
    p.validate();
    return p;
}

std::string profile_to_json(const TimingProfile& p) {
    ordered_json j;
    j["name"] = p.name;
    j["description"] = p.description;
    stages_to_json(p.eager, j);
    if (p.compiled) {
        ordered_json c;
        stages_to_json(*p.compiled, c);
        j["compiled"] = c;
    }
    ordered_json o = ordered_json::object();
    if (p.observed.classes) o["classes"] = p.observed.classes;
    if (!p.observed.level_ms.empty()) o["level_ms"] = p.observed.level_ms;
    if (!p.observed.sum_ms.empty()) o["sum_ms"] = table_to_json(p.observed.sum_ms);
    if (!p.observed.seq_fps.empty()) o["seq_fps"] = table_to_json(p.observed.seq_fps);
    if (!p.observed.pipe_fps.empty()) o["pipe_fps"] = table_to_json(p.observed.pipe_fps);
    if (!o.empty()) j["observed"] = o;
    return j.dump(2);
}

TimingProfile load_profile_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open profile " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return profile_from_json(ss.str());
}

}  // namespace dart
