// SPDX-License-Identifier: Apache-2.0
// End-to-end checks of the dcbf_bench harness.
#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "dcbf/csv.hpp"
#include "experiments.hpp"

namespace fs = std::filesystem;
using namespace dcbf;

namespace {

std::string env_or_skip(const char* name) {
    const char* v = std::getenv(name);
    return v == nullptr ? std::string() : std::string(v);
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("dcbf_test_" + std::to_string(::getpid()) + "_" + name);
    fs::remove_all(p);
    return p;
}

int run(const std::string& cmd) {
    const int status = std::system((cmd + " > /dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void expect_same_tree(const fs::path& a, const fs::path& b) {
    std::size_t files = 0;
    for (const auto& entry : fs::directory_iterator(a)) {
        const fs::path other = b / entry.path().filename();
        ASSERT_TRUE(fs::exists(other)) << other;
        EXPECT_EQ(slurp(entry.path()), slurp(other)) << entry.path().filename();
        ++files;
    }
    EXPECT_GT(files, 0u);
    EXPECT_EQ(files, static_cast<std::size_t>(std::distance(fs::directory_iterator(b), fs::directory_iterator())));
}

class Bench : public ::testing::Test {
  protected:
    void SetUp() override {
        bench_ = env_or_skip("DCBF_BENCH");
        if (bench_.empty()) GTEST_SKIP() << "DCBF_BENCH not set";
    }
    std::string bench_;
};

}  // namespace

TEST_F(Bench, UnknownExperimentExitsTwo) { EXPECT_EQ(run(bench_ + " no-such-experiment"), 2); }

TEST_F(Bench, UsageErrorsExitTwo) {
    EXPECT_EQ(run(bench_), 2);
    EXPECT_EQ(run(bench_ + " diffusion --no-such-flag"), 2);
    EXPECT_EQ(run(bench_ + " --help"), 0);
}

TEST(RunExperiment, UnknownNamePrintsUsage) {
    bench::ExperimentSpec spec;
    spec.name = "bogus";
    std::ostringstream log, err;
    EXPECT_EQ(bench::run_experiment(spec, log, err), 2);
    EXPECT_NE(err.str().find("usage:"), std::string::npos);
    EXPECT_NE(err.str().find("overhead-balanced"), std::string::npos);
}

TEST(RunExperiment, AbortsMapToExitThree) {
    std::ostringstream err;
    EXPECT_EQ(bench::run_guarded([] { throw LoopCapExceeded("node 3"); }, err), 3);
    EXPECT_EQ(bench::run_guarded([] { throw BoundViolation("phi above bound"); }, err), 3);
    EXPECT_EQ(bench::run_guarded([] { throw RejectionCapExceeded("bridge"); }, err), 3);
    EXPECT_NE(err.str().find("loop cap"), std::string::npos);
    EXPECT_NE(err.str().find("bound violation"), std::string::npos);
    EXPECT_EQ(bench::run_guarded([] {}, err), 0);
}

TEST(RunExperiment, BadCoxSizeIsInvalidInput) {
    bench::ExperimentSpec spec;
    spec.name = "cox";
    spec.n = 10;
    spec.out = scratch("badcox").string();
    std::ostringstream log, err;
    EXPECT_EQ(bench::run_experiment(spec, log, err), 2);
}

TEST_F(Bench, RerunsAreByteIdentical) {
    const std::vector<std::string> runs{
        "factory-check --iters 2000",
        "overhead-balanced --iters 2000",
        "overhead-scaling --n 16 --iters 500",
        "vanilla-blowup --n 15 --iters 500",
        "diffusion --n 16 --iters 500",
        "cox --n 16 --iters 300 --adapt 100",
    };
    for (std::size_t k = 0; k < runs.size(); ++k) {
        const fs::path a = scratch("rerun_a" + std::to_string(k));
        const fs::path b = scratch("rerun_b" + std::to_string(k));
        ASSERT_EQ(run(bench_ + " " + runs[k] + " --seed 5 --out " + a.string()), 0) << runs[k];
        ASSERT_EQ(run(bench_ + " " + runs[k] + " --seed 5 --out " + b.string()), 0) << runs[k];
        ASSERT_TRUE(fs::exists(a / "summary.csv") || fs::exists(a / "summary_cgs.csv")) << runs[k];
        expect_same_tree(a, b);
    }
}

TEST_F(Bench, SeedChangesOutput) {
    const fs::path a = scratch("seed_a");
    const fs::path b = scratch("seed_b");
    ASSERT_EQ(run(bench_ + " diffusion --n 16 --iters 300 --seed 1 --out " + a.string()), 0);
    ASSERT_EQ(run(bench_ + " diffusion --n 16 --iters 300 --seed 2 --out " + b.string()), 0);
    EXPECT_NE(slurp(a / "trace.csv"), slurp(b / "trace.csv"));
}

TEST_F(Bench, TraceHeadersAndTiming) {
    const fs::path d = scratch("headers");
    ASSERT_EQ(run(bench_ + " diffusion --n 16 --iters 200 --timing --out " + d.string()), 0);
    std::ifstream trace(d / "trace.csv");
    std::string header;
    std::getline(trace, header);
    EXPECT_EQ(header, "iter,theta_1,outcome,leaf_outputs,leaf_loops,merge_loops,time_ns");
    std::ifstream summary(d / "summary.csv");
    std::getline(summary, header);
    EXPECT_EQ(header, "n,ell,omega_hat,phi_hat,acf1,acf4,acf16,ess,mean_time_ns");
    std::string line;
    std::getline(summary, line);
    const auto fields = detail::split_csv(line);
    ASSERT_EQ(fields.size(), 9u);
    EXPECT_GT(std::stod(fields[8]), 0.0);

    const fs::path c = scratch("cox_headers");
    ASSERT_EQ(run(bench_ + " cox --n 16 --iters 50 --adapt 20 --sampler cgs --out " + c.string()), 0);
    std::ifstream cox_trace(c / "trace_cgs.csv");
    std::getline(cox_trace, header);
    EXPECT_EQ(header, "iter,theta_1,theta_2,outcome,leaf_outputs,leaf_loops,merge_loops,time_ns");
    EXPECT_FALSE(fs::exists(c / "trace_ags.csv"));
}

TEST_F(Bench, DataFlagReloadsDataset) {
    const fs::path a = scratch("data_a");
    const fs::path b = scratch("data_b");
    ASSERT_EQ(run(bench_ + " diffusion --n 16 --iters 300 --seed 4 --out " + a.string()), 0);
    ASSERT_EQ(run(bench_ + " diffusion --data " + (a / "data.csv").string() + " --iters 300 --seed 4 --out " +
                  b.string()),
              0);
    EXPECT_EQ(slurp(a / "trace.csv"), slurp(b / "trace.csv"));

    const fs::path c = scratch("data_c");
    const fs::path e = scratch("data_e");
    ASSERT_EQ(run(bench_ + " cox --n 16 --iters 50 --adapt 20 --sampler ags --out " + c.string()), 0);
    ASSERT_EQ(run(bench_ + " cox --data " + (c / "points.csv").string() + " --iters 50 --adapt 20 --sampler ags --out " +
                  e.string()),
              0);
    EXPECT_EQ(slurp(c / "points.csv"), slurp(e / "points.csv"));
    EXPECT_EQ(run(bench_ + " diffusion --data /nonexistent/data.csv --out " + e.string()), 2);
}

TEST_F(Bench, ConfigFileSuppliesOptions) {
    const fs::path d = scratch("config");
    fs::create_directories(d);
    {
        std::ofstream cfg(d / "run.ini");
        cfg << "n=8\niters=120\nseed=9\n";
    }
    const fs::path out = d / "out";
    ASSERT_EQ(run(bench_ + " diffusion --config " + (d / "run.ini").string() + " --out " + out.string()), 0);
    std::ifstream data(out / "data.csv");
    const auto rows = detail::read_numeric_csv(data, {"t", "x"});
    EXPECT_EQ(rows.size(), 9u);
    std::ifstream trace(out / "trace.csv");
    std::string line;
    std::size_t lines = 0;
    while (std::getline(trace, line)) ++lines;
    EXPECT_EQ(lines, 121u);
}

TEST_F(Bench, OverheadBalancedMatchesFourToTheEll) {
    const fs::path d = scratch("balanced");
    ASSERT_EQ(run(bench_ + " overhead-balanced --ell 3 --iters 100000 --out " + d.string()), 0);
    std::ifstream in(d / "overhead_balanced.csv");
    const auto rows = detail::read_numeric_csv(
        in, {"ell", "leaves", "root_flips", "omega_hat", "omega_se", "phi_hat", "predicted"});
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_LT(std::abs(rows[0][3] - 64.0), 3.0 * rows[0][4]);
}

TEST_F(Bench, VanillaSlope) {
    const fs::path d = scratch("vanilla");
    ASSERT_EQ(run(bench_ + " vanilla-blowup --n 30 --out " + d.string()), 0);
    std::ifstream in(d / "vanilla_fit.csv");
    const auto rows = detail::read_numeric_csv(in, {"slope", "expected_slope", "relative_error"});
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_LT(rows[0][2], 0.10);
}

TEST_F(Bench, SummaryRecomputesExactly) {
    const std::string script = env_or_skip("DCBF_RECOMPUTE");
    if (script.empty() || run("python3 --version") != 0) GTEST_SKIP() << "python3 or script unavailable";
    const fs::path d = scratch("recompute");
    ASSERT_EQ(run(bench_ + " diffusion --n 16 --iters 2000 --seed 7 --out " + d.string()), 0);
    EXPECT_EQ(run("python3 " + script + " " + (d / "trace.csv").string() + " 16 2 --check " +
                  (d / "summary.csv").string()),
              0);
    const fs::path b = scratch("recompute_burn");
    ASSERT_EQ(run(bench_ + " diffusion --n 16 --iters 2000 --burn-in 300 --timing --out " + b.string()), 0);
    EXPECT_EQ(run("python3 " + script + " " + (b / "trace.csv").string() + " 16 2 --burn-in 300 --check " +
                  (b / "summary.csv").string()),
              0);
    const fs::path c = scratch("recompute_cox");
    ASSERT_EQ(run(bench_ + " cox --n 64 --iters 1000 --adapt 200 --out " + c.string()), 0);
    for (const std::string s : {"cgs", "ags"}) {
        EXPECT_EQ(run("python3 " + script + " " + (c / ("trace_" + s + ".csv")).string() + " 64 3 --check " +
                      (c / ("summary_" + s + ".csv")).string()),
                  0)
            << s;
    }
    // A tampered summary must be rejected.
    {
        std::ofstream bad(c / "tampered.csv");
        bad << "n,ell,omega_hat,phi_hat,acf1,acf4,acf16,ess,mean_time_ns\n64,3,1,1,0.5,0.5,0.5,10,0\n";
    }
    EXPECT_NE(run("python3 " + script + " " + (c / "trace_cgs.csv").string() + " 64 3 --check " +
                  (c / "tampered.csv").string()),
              0);
}

TEST_F(Bench, CoxParallelMatchesSerial) {
    const fs::path a = scratch("cox_serial");
    const fs::path b = scratch("cox_parallel");
    ASSERT_EQ(run(bench_ + " cox --n 16 --iters 200 --adapt 100 --seed 6 --out " + a.string()), 0);
    ASSERT_EQ(run(bench_ + " cox --n 16 --iters 200 --adapt 100 --seed 6 --parallel --out " + b.string()), 0);
    expect_same_tree(a, b);
}
