// Copyright Contributors to the gtrace Project
// SPDX-License-Identifier: Apache-2.0

// Drives the gtrace tool as a subprocess on a small configuration.

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const std::string kCli = GTRACE_CLI_PATH;
const std::string kSmall = GTRACE_TEST_DATA "/small.json";

struct Run {
    int code;
    std::string err;
};

fs::path scratch(const std::string &name) {
    const auto p = fs::temp_directory_path() / ("gtrace_cli_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path &p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

Run run(const std::string &args, const std::string &env = "") {
    const auto err = fs::temp_directory_path() / ("gtrace_cli_test_stderr_" + std::to_string(::getpid()) + ".txt");
    const std::string cmd = env + " \"" + kCli + "\" " + args + " 2> \"" + err.string() + "\" > /dev/null";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

json error_of(const Run &r) {
    auto j = json::parse(r.err);
    EXPECT_TRUE(j.contains("error"));
    return j["error"];
}

/// One full pipeline run shared by the tests below.
const fs::path &pipeline_dir() {
    static const fs::path dir = [] {
        auto d = scratch("pipeline");
        const auto r = run("pipeline --config " + kSmall + " --seed 42 --out " + d.string());
        EXPECT_EQ(r.code, 0) << r.err;
        return d;
    }();
    return dir;
}

} // namespace

TEST(Cli, PipelineWritesEveryArtifact) {
    const auto &d = pipeline_dir();
    for (const char *f : {"scene.json", "weights.bin", "merge_log.jsonl", "scene_refined.json", "rounds.jsonl",
                          "scene_lifted.json", "lift_loss.jsonl", "report.json", "timings.json", "masks/index.json",
                          "gt/view_00.pgm", "merged/view_00.pgm", "patches/view_00.pgm", "segment/object_1.json",
                          "selfprompt/object_1.json", "reports/extract.json"})
        EXPECT_TRUE(fs::exists(d / f)) << f;
    const auto r = json::parse(slurp(d / "report.json"));
    EXPECT_EQ(r["schema_version"], 1);
    EXPECT_EQ(r["stage"], "pipeline");
    EXPECT_TRUE(r["timings"].empty());
    for (const char *s : {"generate", "gtmaps", "inject", "trace", "merge", "refine", "lift", "segment", "extract",
                          "selfprompt"})
        EXPECT_TRUE(r["metrics"].contains(s)) << s;
    const auto manifest = json::parse(slurp(d / "segment/object_1.json"));
    for (const char *k : {"query_points", "threshold", "per_view_iou", "n_selected_gaussians"})
        EXPECT_TRUE(manifest.contains(k)) << k;
}

TEST(Cli, PipelineIsByteIdenticalAcrossRuns) {
    const auto &a = pipeline_dir();
    const auto b = scratch("pipeline_b");
    ASSERT_EQ(run("pipeline --config " + kSmall + " --seed 42 --threads 1 --out " + b.string()).code, 0);
    std::size_t files = 0;
    for (const auto &e : fs::recursive_directory_iterator(a)) {
        if (!e.is_regular_file() || e.path().filename() == "timings.json")
            continue;
        const auto rel = fs::relative(e.path(), a);
        ASSERT_TRUE(fs::exists(b / rel)) << rel;
        EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
        ++files;
    }
    EXPECT_GT(files, 30u);
}

TEST(Cli, SeedChangesTheScene) {
    const auto d = scratch("seed");
    ASSERT_EQ(run("generate --config " + kSmall + " --seed 43 --out " + d.string()).code, 0);
    EXPECT_NE(slurp(d / "scene.json"), slurp(pipeline_dir() / "scene.json"));
}

TEST(Cli, StagesRerunFromArtifacts) {
    const auto &d = pipeline_dir();
    const auto before = slurp(d / "reports/merge.json");
    const auto maps = slurp(d / "merged/view_02.pgm");
    ASSERT_EQ(run("merge --config " + kSmall + " --seed 42 --out " + d.string()).code, 0);
    EXPECT_EQ(slurp(d / "reports/merge.json"), before);
    EXPECT_EQ(slurp(d / "merged/view_02.pgm"), maps);
    ASSERT_EQ(run("report --config " + kSmall + " --seed 42 --out " + d.string()).code, 0);
}

TEST(Cli, EvalGroundTruthAgainstItselfIsPerfect) {
    const auto &d = pipeline_dir();
    ASSERT_EQ(run("eval --out " + d.string() + " --pred gt --gt gt").code, 0);
    const auto r = json::parse(slurp(d / "reports/eval.json"));
    EXPECT_EQ(r["metrics"]["mean_miou"], 1.0);
    EXPECT_EQ(r["metrics"]["min_miou"], 1.0);
    for (const auto &x : r["metrics"]["per_view_macc"])
        EXPECT_EQ(x, 1.0);
}

TEST(Cli, TimingsFlagFillsReports) {
    const auto d = scratch("timings");
    ASSERT_EQ(run("generate --config " + kSmall + " --timings --out " + d.string()).code, 0);
    const auto r = json::parse(slurp(d / "reports/generate.json"));
    EXPECT_TRUE(r["timings"].contains("seconds"));
}

TEST(Cli, OutputDirectoryFromEnvironment) {
    const auto d = scratch("env");
    ASSERT_EQ(run("generate --config " + kSmall, "GTRACE_OUTPUT_DIR=" + d.string()).code, 0);
    EXPECT_TRUE(fs::exists(d / "scene.json"));
}

TEST(Cli, UnknownFlagIsAUsageError) {
    const auto r = run("generate --frobnicate");
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(error_of(r)["type"], "usage");
}

TEST(Cli, MissingInputNamesTheStage) {
    const auto d = scratch("missing");
    const auto r = run("merge --config " + kSmall + " --out " + d.string());
    EXPECT_NE(r.code, 0);
    const auto e = error_of(r);
    EXPECT_EQ(e["stage"], "merge");
    EXPECT_NE(e["message"].get<std::string>().find("scene.json"), std::string::npos);
}

TEST(Cli, SchemaVersionMismatchIsAnError) {
    const auto d = scratch("schema");
    std::ofstream(d / "bad.json") << R"({"schema_version": 99})";
    const auto r = run("generate --config " + (d / "bad.json").string() + " --out " + d.string());
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(error_of(r)["type"], "validation");
}

TEST(Cli, UnknownConfigKeyIsAnError) {
    const auto d = scratch("key");
    std::ofstream(d / "bad.json") << R"({"seed": 1, "sede": 2})";
    const auto r = run("generate --config " + (d / "bad.json").string() + " --out " + d.string());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(error_of(r)["message"].get<std::string>().find("sede"), std::string::npos);
}

TEST(Cli, ReportWithUnknownSchemaIsRejected) {
    const auto d = scratch("report");
    fs::create_directories(d / "reports");
    std::ofstream(d / "reports/merge.json") << R"({"schema_version": 2, "stage": "merge", "metrics": {}})";
    const auto r = run("report --out " + d.string());
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(error_of(r)["type"], "validation");
}
