// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <random>
#include <sstream>

#include "dcbf/mcmc.hpp"
#include "stat_helpers.hpp"

using namespace dcbf;
using dcbf::stat::binomial_z;

namespace {

std::vector<double> ar1(double rho, std::size_t n, std::uint64_t seed) {
    RandomStream s(seed);
    std::normal_distribution<double> z;
    std::vector<double> x(n);
    x[0] = z(s) / std::sqrt(1 - rho * rho);
    for (std::size_t t = 1; t < n; ++t) {
        x[t] = rho * x[t - 1] + z(s);
    }
    return x;
}

// Proposes the neighbours of x on the cycle {0, 1, 2} with equal probability.
struct CycleProposal {
    double draw(double x, RandomStream& s) const {
        const int step = s.uniform() < 0.5 ? 1 : 2;
        return static_cast<double>((static_cast<int>(x) + step) % 3);
    }
};

}  // namespace

TEST(Acf, WhiteNoise) {
    const auto x = ar1(0.0, 10000, 1);
    EXPECT_LT(std::abs(acf(x, 1)), 0.03);
}

TEST(Acf, Ar1LagOne) {
    const auto x = ar1(0.5, 100000, 2);
    EXPECT_NEAR(acf(x, 1), 0.5, 0.02);
    EXPECT_NEAR(acf(x, 4), 0.0625, 0.02);
}

TEST(Acf, Errors) {
    EXPECT_THROW(acf(std::vector<double>(100, 1.0), 1), std::domain_error);
    EXPECT_THROW(acf(std::vector<double>(15, 1.0), 4), std::invalid_argument);
}

TEST(Ess, Ar1ClosedForm) {
    const auto x = ar1(0.5, 100000, 3);
    const double expected = 100000.0 * 0.5 / 1.5;
    EXPECT_NEAR(ess(x), expected, 0.1 * expected);
}

TEST(Barker, ThreeStateKernel) {
    const std::array<double, 3> target{0.2, 0.3, 0.5};
    auto make = [&](double current, double proposed) {
        std::vector<FactorPair> f;
        for (int k = 0; k < 2; ++k) {
            f.push_back({WeightedCoin::known(1.0, std::sqrt(target[static_cast<int>(proposed)])),
                         WeightedCoin::known(1.0, std::sqrt(target[static_cast<int>(current)]))});
        }
        return f;
    };
    const PartitionTree tree = build_tree(2, 1);
    RandomStream s(4);
    RandomStream shuffle(5);
    CostLedger ledger;
    const std::size_t reps = 20000;
    for (int x = 0; x < 3; ++x) {
        std::array<std::size_t, 3> moves{};
        for (std::size_t i = 0; i < reps; ++i) {
            const auto r = barker_step(x, make, CycleProposal{}, tree, {}, s, shuffle, ledger);
            ++moves[static_cast<int>(r.value)];
        }
        for (int y = 0; y < 3; ++y) {
            if (y == x) continue;
            const double k = 0.5 * target[y] / (target[x] + target[y]);
            EXPECT_LT(binomial_z(moves[y], reps, k), 4.0) << x << "->" << y;
        }
    }
}

TEST(Barker, ZeroOddsNeverAccepted) {
    auto make = [](double, double) { return std::vector<FactorPair>{}; };
    RandomStream s(6);
    RandomStream shuffle(7);
    CostLedger ledger;
    const PartitionTree tree = build_tree(1, 0);
    for (int i = 0; i < 100; ++i) {
        EXPECT_EQ(barker_step(0.0, make, UniformProposal{1.0}, tree, {}, s, shuffle, ledger).value, 0.0);
    }
    auto zero_numer = [](double, double) {
        return std::vector<FactorPair>{{WeightedCoin::known(0.0, 1.0), WeightedCoin::known(1.0, 1.0)}};
    };
    for (int i = 0; i < 100; ++i) {
        EXPECT_EQ(barker_step(0.0, zero_numer, UniformProposal{1.0}, tree, {}, s, shuffle, ledger).outcome,
                  FlipOutcome::Tails);
    }
}

TEST(Barker, DegenerateProposalAcceptsHalf) {
    auto make = [](double, double) {
        return std::vector<FactorPair>{{WeightedCoin::known(1.0, 0.4), WeightedCoin::known(1.0, 0.4)}};
    };
    RandomStream s(8);
    RandomStream shuffle(9);
    CostLedger ledger;
    const PartitionTree tree = build_tree(1, 0);
    std::size_t heads = 0;
    for (int i = 0; i < 20000; ++i) {
        heads += barker_step(0.0, make, UniformProposal{0.0}, tree, {}, s, shuffle, ledger).outcome ==
                         FlipOutcome::Heads
                     ? 1
                     : 0;
    }
    EXPECT_LT(binomial_z(heads, 20000, 0.5), 4.0);
}

TEST(Barker, StationaryDistributionMatchesPosterior) {
    // Two Gaussian factors exp(-(t - m)^2 / (2 s^2)) with (m, s) = (0, 1) and
    // (1, 0.5): the posterior is normal with precision 5 and mean 0.8.
    auto factor = [](double t, double m, double sd) { return std::exp(-(t - m) * (t - m) / (2 * sd * sd)); };
    auto make = [&](double current, double proposed) {
        return std::vector<FactorPair>{
            {WeightedCoin::known(1.0, factor(proposed, 0, 1)), WeightedCoin::known(1.0, factor(current, 0, 1))},
            {WeightedCoin::known(1.0, factor(proposed, 1, 0.5)), WeightedCoin::known(1.0, factor(current, 1, 0.5))}};
    };
    const double mean = 0.8;
    const double sd = 1.0 / std::sqrt(5.0);
    const PartitionTree tree = build_tree(2, 1);
    RandomStream s(10);
    RandomStream shuffle(11);
    CostLedger ledger;
    const int bins = 50;
    const double lo = mean - 3.5 * sd;
    const double hi = mean + 3.5 * sd;
    std::vector<double> hist(bins + 2, 0.0);
    double x = mean;
    const std::size_t reps = 100000;
    for (std::size_t i = 0; i < reps; ++i) {
        x = barker_step(x, make, UniformProposal{2.5 * sd}, tree, {}, s, shuffle, ledger).value;
        const int b = x < lo ? 0 : (x >= hi ? bins + 1 : 1 + static_cast<int>((x - lo) / (hi - lo) * bins));
        hist[b] += 1.0 / reps;
    }
    auto cdf = [&](double v) { return 0.5 * std::erfc(-(v - mean) / (sd * std::sqrt(2.0))); };
    double tv = 0.0;
    for (int b = 0; b < bins + 2; ++b) {
        const double a = b == 0 ? -INFINITY : lo + (b - 1) * (hi - lo) / bins;
        const double c = b == bins + 1 ? INFINITY : lo + b * (hi - lo) / bins;
        tv += std::abs(hist[b] - (cdf(c) - cdf(a)));
    }
    EXPECT_LT(0.5 * tv, 0.03);
}

TEST(Vanilla, EnlMatchesGeometricMean) {
    RandomStream s(12);
    EXPECT_EQ(vanilla_two_coin_benchmark(0, 0.9, 1000, s), 1.0);
    const double enl = vanilla_two_coin_benchmark(10, 0.9, 20000, s);
    EXPECT_NEAR(enl, std::pow(0.9, -10), 0.1 * std::pow(0.9, -10));
}

TEST(Vanilla, LogSlope) {
    RandomStream s(13);
    std::vector<double> n;
    std::vector<double> log_enl;
    for (int k = 5; k <= 30; k += 5) {
        n.push_back(k);
        log_enl.push_back(std::log(vanilla_two_coin_benchmark(k, 0.9, 20000, s)));
    }
    EXPECT_NEAR(fit_slope(n, log_enl), -std::log(0.9), 0.1 * -std::log(0.9));
}

TEST(Trace, CsvFormat) {
    ChainTrace trace;
    trace.num_params = 2;
    trace.rows.push_back({0, {0.5, 1.25}, FlipOutcome::Heads, 4, 6, 2, 0});
    trace.rows.push_back({1, {0.1, 2.0}, FlipOutcome::Escaped, 1, 1, 0, 0});
    std::ostringstream out;
    write_trace_csv(out, trace);
    EXPECT_EQ(out.str(),
              "iter,theta_1,theta_2,outcome,leaf_outputs,leaf_loops,merge_loops,time_ns\n"
              "0,0.5,1.25,H,4,6,2,0\n"
              "1,0.1,2,E,1,1,0,0\n");
    EXPECT_EQ(trace.acceptance_rate(), 0.5);
}

TEST(Trace, SummaryUsesPostBurnInRows) {
    ChainTrace trace;
    const auto x = ar1(0.5, 2000, 14);
    for (std::size_t i = 0; i < x.size(); ++i) {
        trace.rows.push_back({i, {x[i]}, FlipOutcome::Tails, i < 1000 ? 100u : 4u, i < 1000 ? 100u : 8u, 3, 0});
    }
    const SummaryRow row = summarize(trace, 16, 2, 1000);
    EXPECT_EQ(row.omega_hat, 4.0);
    EXPECT_EQ(row.phi_hat, 8.0);
    const std::vector<double> tail(x.begin() + 1000, x.end());
    EXPECT_EQ(row.acf1, acf(tail, 1));
    EXPECT_EQ(row.ess, ess(tail));
    std::ostringstream out;
    write_summary_header(out);
    EXPECT_EQ(out.str(), "n,ell,omega_hat,phi_hat,acf1,acf4,acf16,ess,mean_time_ns\n");
}

TEST(Trace, FormatDoubleRoundTrips) {
    for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 12345.678}) {
        EXPECT_EQ(std::stod(format_double(v)), v);
    }
    EXPECT_EQ(format_double(std::nan("")), "nan");
}

TEST(ChainConfig, Validation) {
    ChainConfig c;
    c.iterations = 10;
    c.burn_in = 10;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_THROW(scaled_proposal(0.0, 4), std::invalid_argument);
    EXPECT_DOUBLE_EQ(scaled_proposal(8.0, 16).half_width, 2.0);
}
