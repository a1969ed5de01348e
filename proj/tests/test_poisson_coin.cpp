// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <optional>

#include "dcbf/poisson_coin.hpp"
#include "stat_helpers.hpp"

using namespace dcbf;
using dcbf::stat::binomial_z;

namespace {

BoundedPath constant_path(double value, double lower, double upper, double horizon) {
    return {[value](double) { return value; }, lower, upper, horizon};
}

}  // namespace

TEST(PoissonCoin, PathAtLowerBoundAlwaysHeads) {
    RandomStream s(1);
    CostLedger ledger;
    const auto path = constant_path(-1.0, -1.0, 2.0, 3.0);
    for (int i = 0; i < 1000; ++i) {
        ASSERT_TRUE(flip_poisson_coin(path, s, ledger));
    }
}

TEST(PoissonCoin, ZeroRateNeverEvaluates) {
    RandomStream s(2);
    CostLedger ledger;
    const auto path = constant_path(0.5, 0.5, 0.5, 10.0);
    for (int i = 0; i < 1000; ++i) {
        ASSERT_TRUE(flip_poisson_coin(path, s, ledger));
    }
    EXPECT_EQ(ledger.path_evaluations, 0u);
}

TEST(PoissonCoin, UnitIntegralGivesInverseE) {
    RandomStream s(3);
    CostLedger ledger;
    const auto path = constant_path(1.0, 0.0, 1.0, 1.0);
    std::size_t heads = 0;
    const std::size_t n = 100000;
    for (std::size_t i = 0; i < n; ++i) {
        heads += flip_poisson_coin(path, s, ledger) ? 1 : 0;
    }
    EXPECT_LT(binomial_z(heads, n, std::exp(-1.0)), 4.0);
    EXPECT_NEAR(static_cast<double>(ledger.path_evaluations) / n, 1.0, 0.05);
}

TEST(PoissonCoin, PiecewiseConstantIntegral) {
    RandomStream s(4);
    CostLedger ledger;
    // w = 0.2 on [0, 1), 1.5 on [1, 2), 0.7 on [2, 3]; lower 0, upper 2.
    const BoundedPath path{[](double t) { return t < 1.0 ? 0.2 : (t < 2.0 ? 1.5 : 0.7); }, 0.0, 2.0, 3.0};
    std::size_t heads = 0;
    const std::size_t n = 100000;
    for (std::size_t i = 0; i < n; ++i) {
        heads += flip_poisson_coin(path, s, ledger) ? 1 : 0;
    }
    EXPECT_LT(binomial_z(heads, n, std::exp(-(0.2 + 1.5 + 0.7))), 4.0);
}

TEST(PoissonCoin, EvaluationCostLaw) {
    RandomStream s(5);
    for (double rate : {0.5, 2.0, 8.0}) {
        CostLedger ledger;
        const auto path = constant_path(0.1, 0.0, rate, 1.0);
        const std::size_t n = 20000;
        for (std::size_t i = 0; i < n; ++i) {
            flip_poisson_coin(path, s, ledger);
        }
        EXPECT_NEAR(static_cast<double>(ledger.path_evaluations) / n, rate, 0.05 * rate);
    }
}

TEST(PoissonCoin, EvaluatesInAscendingTime) {
    RandomStream s(6);
    CostLedger ledger;
    double last = -1.0;
    bool ordered = true;
    const BoundedPath path{[&](double t) {
                               ordered = ordered && t >= last;
                               last = t;
                               return 0.5;
                           },
                           0.0, 1.0, 20.0};
    for (int i = 0; i < 100; ++i) {
        last = -1.0;
        flip_poisson_coin(path, s, ledger);
    }
    EXPECT_TRUE(ordered);
}

TEST(PoissonCoin, BoundViolationThrows) {
    RandomStream s(7);
    CostLedger ledger;
    const auto path = constant_path(1.5, 0.0, 1.0, 50.0);
    EXPECT_THROW(flip_poisson_coin(path, s, ledger), BoundViolation);
}

TEST(PoissonCoin, WeightedCoinWrapper) {
    RandomStream s(8);
    CostLedger ledger;
    const WeightedCoin coin = poisson_weighted_coin(std::log(2.0), constant_path(1.0, 0.0, 1.0, 1.0));
    EXPECT_NEAR(coin.scale(), 2.0, 1e-12);
    std::size_t heads = 0;
    for (int i = 0; i < 20000; ++i) {
        heads += coin.flip(s, ledger) ? 1 : 0;
    }
    EXPECT_LT(binomial_z(heads, 20000, std::exp(-1.0)), 4.0);
}

TEST(BatchFirstSuccess, HugeRateHitsFirstCoin) {
    RandomStream s(9);
    CostLedger ledger;
    const std::vector<BoundedPath> paths(5, constant_path(0.0, 0.0, 1e6, 1.0));
    for (int i = 0; i < 100; ++i) {
        const BatchResult r = batch_first_success(paths, s, ledger);
        ASSERT_TRUE(r.index.has_value());
        EXPECT_EQ(*r.index, 0u);
        EXPECT_TRUE(r.bit);
    }
}

TEST(BatchFirstSuccess, ZeroRateNeverSucceeds) {
    RandomStream s(10);
    CostLedger ledger;
    const std::vector<BoundedPath> paths(5, constant_path(0.0, 0.0, 0.0, 1.0));
    EXPECT_FALSE(batch_first_success(paths, s, ledger).index.has_value());
}

TEST(BatchFirstSuccess, GeometricIndex) {
    RandomStream s(11);
    CostLedger ledger;
    const std::vector<BoundedPath> paths(200, constant_path(0.0, 0.0, std::log(2.0), 1.0));
    std::vector<double> idx;
    for (int i = 0; i < 40000; ++i) {
        const BatchResult r = batch_first_success(paths, s, ledger);
        ASSERT_TRUE(r.index.has_value());
        idx.push_back(static_cast<double>(*r.index + 1));
    }
    const auto [mean, se] = stat::mean_and_se(idx);
    EXPECT_NEAR(mean, 2.0, 4.0 * se);
}

TEST(BatchFirstSuccess, MatchesSequentialFlips) {
    RandomStream s(12);
    CostLedger ledger;
    std::vector<BoundedPath> paths;
    for (int i = 0; i < 30; ++i) {
        const double value = 0.3 + 0.02 * i;
        paths.push_back(constant_path(value, 0.0, 1.0, 0.5));
    }
    std::vector<double> batched;
    std::vector<double> sequential;
    for (int i = 0; i < 10000; ++i) {
        const auto a = first_tails_batched(paths, s, ledger);
        const auto b = first_tails_sequential(paths, s, ledger);
        batched.push_back(a ? static_cast<double>(*a) : 1e9);
        sequential.push_back(b ? static_cast<double>(*b) : 1e9);
    }
    EXPECT_LT(stat::ks_two_sample(batched, sequential), 0.03);
}

TEST(BatchFirstSuccess, RejectsMixedIntensities) {
    RandomStream s(13);
    CostLedger ledger;
    const std::vector<BoundedPath> paths{constant_path(0.0, 0.0, 1.0, 1.0), constant_path(0.0, 0.0, 2.0, 1.0)};
    EXPECT_THROW(batch_first_success(paths, s, ledger), std::invalid_argument);
}
