#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dart/cli.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace dart;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = 0;
    std::string out, err;
};

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("dart_cli_" + name);
    fs::remove_all(dir);
    return dir;
}

Run run(std::vector<std::string> args, const fs::path& out_dir) {
    args.insert(args.begin(), {"--out", out_dir.string()});
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::string read(const fs::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

nlohmann::json report(const fs::path& dir, const std::string& command) {
    return nlohmann::json::parse(read(dir / (command + ".report.json")));
}

}  // namespace

TEST_CASE("detect") {
    const auto dir = scratch("detect");
    const auto r = run({"detect", "--classes", "car,person", "--scenes", "2", "--verify"}, dir);
    CHECK(r.code == 0);
    const auto rep = report(dir, "detect");
    CHECK(rep["passed"] == true);
    CHECK(rep.contains("wallclock"));
    CHECK(fs::exists(dir / "detections.json"));

    const auto chunked = run({"detect", "--classes", "a,b,c,d,e,f,g,h,i,j", "--nmax", "4", "--scenes", "1"}, dir);
    CHECK(chunked.code == 0);
    CHECK(read(dir / "detect.report.json").find("\"encdec_passes\": 3") != std::string::npos);
}

TEST_CASE("usage errors exit 2") {
    const auto dir = scratch("usage");
    CHECK(run({"detect", "--classes", ""}, dir).code == 2);
    CHECK(run({"detect", "--classes", "car", "--level", "warp"}, dir).code == 2);
    CHECK(run({"detect"}, dir).code == 2);
    CHECK(run({"frobnicate"}, dir).code == 2);
    CHECK(run({}, dir).code == 2);
    CHECK(run({"prune", "--k", "two"}, dir).code == 2);
    CHECK(run({"--version"}, dir).code == 0);
}

TEST_CASE("unknown preset lists the available ones") {
    const auto r = run({"bench", "--preset", "nope"}, scratch("preset"));
    CHECK(r.code != 0);
    CHECK(r.err.find("paper-trt-1008") != std::string::npos);
}

TEST_CASE("bench presets") {
    const auto dir = scratch("bench");
    CHECK(run({"bench", "--preset", "paper-pytorch-1008", "--verify"}, dir).code == 0);
    auto rep = report(dir, "bench");
    CHECK(rep["passed"] == true);
    CHECK(run({"bench", "--preset", "paper-trt-1008", "--classes", "4", "--verify"}, dir).code == 0);
    rep = report(dir, "bench");
    CHECK(rep.dump().find("72.4") != std::string::npos);
}

TEST_CASE("schedule") {
    const auto dir = scratch("schedule");
    const auto r = run({"schedule", "--preset", "paper-trt-1008", "--classes", "4", "--frames", "50", "--verify"}, dir);
    CHECK(r.code == 0);
    CHECK(fs::exists(dir / "trace.json"));
    CHECK(run({"schedule", "--preset", "paper-trt-1008", "--frames", "0"}, dir).code != 0);
}

TEST_CASE("prune") {
    const auto dir = scratch("prune");
    CHECK(run({"prune", "--k", "2", "--calib", "2", "--memoized", "--verify"}, dir).code == 0);
    CHECK(fs::exists(dir / "plan.json"));
    CHECK(run({"prune", "--k", "13", "--calib", "1"}, dir).code == 1);
}

TEST_CASE("precision") {
    const auto dir = scratch("precision");
    const auto r = run({"precision", "--images", "5", "--depths", "1,2,3"}, dir);
    CHECK(r.code == 0);
    CHECK(run({"precision", "--images", "2"}, dir).code != 0);
}

TEST_CASE("distill") {
    const auto dir = scratch("distill");
    CHECK(run({"distill", "--plant"}, dir).code == 0);
    CHECK(run({"distill", "--plant", "--method", "gd"}, dir).code == 0);
    CHECK(run({"distill", "--method", "newton"}, dir).code == 2);
    CHECK(run({"distill", "--train-images", "4", "--eval-images", "2"}, dir).code != 0);  // too few rows
}

TEST_CASE("seed sources and precedence") {
    const auto dir = scratch("seed");
    const auto ini = dir.string() + ".ini";
    fs::create_directories(dir);
    {
        std::ofstream os(ini);
        os << "seed=5\n";
    }
    const std::vector<std::string> cmd{"detect", "--classes", "car", "--scenes", "1"};
    auto with = [&](std::vector<std::string> pre) {
        pre.insert(pre.end(), cmd.begin(), cmd.end());
        REQUIRE(run(pre, dir).code == 0);
        return report(dir, "detect")["config"]["seed"].get<int>();
    };
    CHECK(with({}) == 0);
    CHECK(with({"--config", ini}) == 5);
    CHECK(with({"--config", ini, "--seed", "6"}) == 6);
    setenv("DART_SEED", "9", 1);
    CHECK(with({}) == 9);
    CHECK(with({"--config", ini}) == 5);
    setenv("DART_SEED", "nine", 1);
    CHECK(run(cmd, dir).code == 2);
    unsetenv("DART_SEED");
    fs::remove(ini);
}

TEST_CASE("report payload drops only the wall clock") {
    const std::string text = R"({"a": 1, "wallclock": {"elapsed_ms": 3.5}, "b": [2]})";
    const auto payload = nlohmann::json::parse(report_payload(text));
    CHECK(payload.size() == 2);
    CHECK_FALSE(payload.contains("wallclock"));
}

TEST_CASE("reruns give identical payloads") {
    const auto dir = scratch("determinism");
    const std::vector<std::pair<std::string, std::vector<std::string>>> cmds{
        {"detect", {"detect", "--classes", "car,dog", "--scenes", "2"}},
        {"schedule", {"schedule", "--frames", "20"}},
        {"distill", {"distill", "--plant"}},
    };
    for (const auto& [name, args] : cmds) {
        REQUIRE(run(args, dir).code == 0);
        const auto first = report_payload(read(dir / (name + ".report.json")));
        REQUIRE(run(args, dir).code == 0);
        CHECK(report_payload(read(dir / (name + ".report.json"))) == first);
    }
}
