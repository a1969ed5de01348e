// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <future>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dcbf/coin.hpp"
#include "dcbf/partition.hpp"
#include "dcbf/rng.hpp"

namespace dcbf {

/*!
 * Odds h(proposed) : h(current) of one factor batch, each side written as a
 * weighted coin c * p.
 *
 * One side may be identically zero; both sides zero is rejected when the pair
 * is flipped.
 */
struct FactorPair {
    WeightedCoin numer;  //!< h at the proposed value
    WeightedCoin denom;  //!< h at the current value

    FactorPair swapped() const { return {denom, numer}; }

    //! Pair representing the product of the odds of all given pairs.
    static FactorPair product(const std::vector<FactorPair>& pairs) {
        std::vector<WeightedCoin> n;
        std::vector<WeightedCoin> d;
        n.reserve(pairs.size());
        d.reserve(pairs.size());
        for (const auto& p : pairs) {
            n.push_back(p.numer);
            d.push_back(p.denom);
        }
        if (pairs.empty()) {
            return {WeightedCoin::certain(0.0), WeightedCoin::certain(0.0)};
        }
        return {dcbf::product(std::move(n)), dcbf::product(std::move(d))};
    }

    /*!
     * Pair from reciprocal representations 1/h = c~ p~ of each side.
     *
     * With h = 1/(c~ p~) the odds h1 : h2 equal c~2 p~2 : c~1 p~1, so the
     * reciprocal coins are used with their roles exchanged.
     */
    static FactorPair from_reciprocal(WeightedCoin numer_reciprocal, WeightedCoin denom_reciprocal) {
        return {std::move(denom_reciprocal), std::move(numer_reciprocal)};
    }
};

/*!
 * Per-loop survival probabilities for the Portkey early exit.
 *
 * A value s means the node escapes with probability 1 - s each time it
 * starts a loop. 1 disables escaping; the default escapes nowhere.
 */
struct PortkeyConfig {
    double leaf_survival = 1.0;
    std::map<int, double> node_survival;  //!< merge levels 0 (root) .. depth-1

    static PortkeyConfig leaf_escape(double escape_probability) {
        PortkeyConfig config;
        config.leaf_survival = 1.0 - escape_probability;
        config.validate();
        return config;
    }

    double at_merge_level(int level) const {
        const auto it = node_survival.find(level);
        return it == node_survival.end() ? 1.0 : it->second;
    }

    void validate() const {
        auto check = [](double s) {
            if (!(s > 0.0 && s <= 1.0)) {
                throw std::domain_error("PortkeyConfig: survival probabilities must lie in (0, 1]");
            }
        };
        check(leaf_survival);
        for (const auto& [level, s] : node_survival) {
            check(s);
        }
    }
};

//! Budgets guarding against inputs on which a factory would never terminate.
struct FactoryLimits {
    std::uint64_t max_flips = 1'000'000'000;  //!< elementary flips per root invocation
    std::uint64_t max_loops = 1'000'000'000;  //!< loops per node invocation
};

struct DcbfOptions {
    FactoryLimits limits;
    bool parallel = false;
    int parallel_depth = 2;  //!< merge levels that fork their children
};

namespace detail {

inline void check_flip_budget(const CostLedger& ledger, std::uint64_t flip_limit) {
    if (ledger.leaf_flips > flip_limit) {
        throw LoopCapExceeded("factory exceeded its elementary flip budget");
    }
}

inline void check_survival(double survival) {
    if (!(survival > 0.0 && survival <= 1.0)) {
        throw std::domain_error("Portkey survival probability must lie in (0, 1]");
    }
}

}  // namespace detail

/*!
 * 2-coin algorithm, optionally with the Portkey exit.
 *
 * Each loop first escapes with probability 1 - survival, then picks the
 * numerator side with probability c1 / (c1 + c2) and flips its p-coin: heads
 * on the numerator side returns Heads, heads on the denominator side returns
 * Tails, tails on either side loops again. Returns Heads with probability
 * c1 p1 / (b + c1 p1 + c2 p2), b = (1/survival - 1)(c1 + c2).
 */
inline FlipOutcome flip_two_coin(const FactorPair& pair, double survival, RandomStream& stream, CostLedger& ledger,
                                 std::size_t node = 1, const FactoryLimits& limits = {},
                                 std::uint64_t flip_limit = std::numeric_limits<std::uint64_t>::max()) {
    detail::check_survival(survival);
    if (pair.numer.is_zero() && pair.denom.is_zero()) {
        throw DegenerateInput("flip_two_coin: both coins have zero weight");
    }
    const double diff = pair.denom.log_scale() - pair.numer.log_scale();
    const double pick_numer = pair.denom.is_zero() ? 1.0 : pair.numer.is_zero() ? 0.0 : 1.0 / (1.0 + std::exp(diff));

    FlipOutcome outcome = FlipOutcome::Escaped;
    for (std::uint64_t loop = 0;; ++loop) {
        if (loop >= limits.max_loops) {
            throw LoopCapExceeded("flip_two_coin: loop cap exceeded");
        }
        ++ledger.leaf_loops;
        ledger.count_node_loop(node);
        if (survival < 1.0 && !bernoulli(stream, survival)) {
            outcome = FlipOutcome::Escaped;
            break;
        }
        if (stream.uniform() < pick_numer) {
            if (pair.numer.flip(stream, ledger)) {
                outcome = FlipOutcome::Heads;
                break;
            }
        } else if (pair.denom.flip(stream, ledger)) {
            outcome = FlipOutcome::Tails;
            break;
        }
        detail::check_flip_budget(ledger, flip_limit);
    }
    ++ledger.leaf_outputs;
    return outcome;
}

/*!
 * Flipped 2-coin: both coins encode reciprocals, 1/h = c~ p~.
 *
 * Returns Heads with probability h_numer / (h_numer + h_denom).
 */
inline FlipOutcome flip_two_coin_flipped(const FactorPair& reciprocal_pair, double survival, RandomStream& stream,
                                         CostLedger& ledger, std::size_t node = 1,
                                         const FactoryLimits& limits = {}) {
    return flip_two_coin(FactorPair::from_reciprocal(reciprocal_pair.numer, reciprocal_pair.denom), survival, stream,
                         ledger, node, limits);
}

/*!
 * Coin merge: flips both input coins until they agree and returns the common
 * value, so the output odds are the product of the input odds.
 *
 * Each loop escapes with probability 1 - survival before flipping; an
 * escaped input propagates immediately.
 */
template <class LeftFlip, class RightFlip>
FlipOutcome flip_merge(LeftFlip&& left, RightFlip&& right, double survival, RandomStream& stream,
                       CostLedger& ledger, std::size_t node = 1, const FactoryLimits& limits = {}) {
    detail::check_survival(survival);
    for (std::uint64_t loop = 0;; ++loop) {
        if (loop >= limits.max_loops) {
            throw LoopCapExceeded("flip_merge: loop cap exceeded (inputs never agree?)");
        }
        ++ledger.merge_loops;
        ledger.count_node_loop(node);
        if (survival < 1.0 && !bernoulli(stream, survival)) {
            return FlipOutcome::Escaped;
        }
        const FlipOutcome a = left();
        if (a == FlipOutcome::Escaped) {
            return a;
        }
        const FlipOutcome b = right();
        if (b == FlipOutcome::Escaped) {
            return b;
        }
        if (a == b) {
            return a;
        }
    }
}

namespace detail {

struct DcbfContext {
    const std::vector<FactorPair>* leaves;
    const PortkeyConfig* portkey;
    const DcbfOptions* options;
    int depth;
};

inline FlipOutcome flip_dcbf_node(const DcbfContext& ctx, std::size_t node, int level, RandomStream& stream,
                                  CostLedger& ledger, std::uint64_t flip_limit) {
    if (level == ctx.depth) {
        const std::size_t leaf = node - (std::size_t{1} << ctx.depth);
        return flip_two_coin((*ctx.leaves)[leaf], ctx.portkey->leaf_survival, stream, ledger, node,
                             ctx.options->limits, flip_limit);
    }
    const double survival = ctx.portkey->at_merge_level(level);
    if (ctx.options->parallel && level < ctx.options->parallel_depth) {
        // Fork-join: each child owns a stream forked from this node's stream
        // and a private ledger merged back after every join.
        RandomStream left_stream = stream.fork();
        RandomStream right_stream = stream.fork();
        auto run_pair = [&]() -> std::pair<FlipOutcome, FlipOutcome> {
            CostLedger left_ledger;
            auto left_future = std::async(std::launch::async, [&] {
                return flip_dcbf_node(ctx, 2 * node, level + 1, left_stream, left_ledger,
                                      ctx.options->limits.max_flips);
            });
            CostLedger right_ledger;
            FlipOutcome b = FlipOutcome::Escaped;
            std::exception_ptr right_error;
            try {
                b = flip_dcbf_node(ctx, 2 * node + 1, level + 1, right_stream, right_ledger,
                                   ctx.options->limits.max_flips);
            } catch (...) {
                right_error = std::current_exception();
            }
            const FlipOutcome a = left_future.get();
            if (right_error) {
                std::rethrow_exception(right_error);
            }
            ledger.merge(left_ledger);
            ledger.merge(right_ledger);
            return {a, b};
        };
        for (std::uint64_t loop = 0;; ++loop) {
            if (loop >= ctx.options->limits.max_loops) {
                throw LoopCapExceeded("flip_dcbf: merge loop cap exceeded");
            }
            ++ledger.merge_loops;
            ledger.count_node_loop(node);
            if (survival < 1.0 && !bernoulli(stream, survival)) {
                return FlipOutcome::Escaped;
            }
            const auto [a, b] = run_pair();
            if (a == FlipOutcome::Escaped || b == FlipOutcome::Escaped) {
                return FlipOutcome::Escaped;
            }
            if (a == b) {
                return a;
            }
        }
    }
    auto left = [&] { return flip_dcbf_node(ctx, 2 * node, level + 1, stream, ledger, flip_limit); };
    auto right = [&] { return flip_dcbf_node(ctx, 2 * node + 1, level + 1, stream, ledger, flip_limit); };
    return flip_merge(left, right, survival, stream, ledger, node, ctx.options->limits);
}

}  // namespace detail

/*!
 * Divide-and-conquer Bernoulli factory.
 *
 * leaves[k] holds the odds of leaf batch k (left to right, 2^depth entries).
 * Leaves run the (Portkey) 2-coin, internal nodes run the coin merge, and the
 * root returns Heads with probability h0(proposed) / (b0 + h0(current) +
 * h0(proposed)) with b0 symmetric in its arguments (b0 = 0 without escapes).
 */
inline FlipOutcome flip_dcbf(int depth, const std::vector<FactorPair>& leaves, const PortkeyConfig& portkey,
                             RandomStream& stream, CostLedger& ledger, const DcbfOptions& options = {}) {
    if (depth < 0 || leaves.size() != (std::size_t{1} << depth)) {
        throw std::invalid_argument("flip_dcbf: need exactly 2^depth leaf pairs");
    }
    portkey.validate();
    const auto start = std::chrono::steady_clock::now();
    const detail::DcbfContext ctx{&leaves, &portkey, &options, depth};
    const std::uint64_t flip_limit = ledger.leaf_flips > std::numeric_limits<std::uint64_t>::max() - options.limits.max_flips
                                         ? std::numeric_limits<std::uint64_t>::max()
                                         : ledger.leaf_flips + options.limits.max_flips;
    const FlipOutcome outcome = detail::flip_dcbf_node(ctx, 1, 0, stream, ledger, flip_limit);
    ++ledger.root_flips;
    ledger.elapsed_ns +=
        std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - start).count();
    return outcome;
}

//! Per-leaf odds: the product of the factor pairs assigned to each leaf.
inline std::vector<FactorPair> leaf_pairs(const PartitionTree& tree, const std::vector<FactorPair>& factors) {
    if (factors.size() != tree.size()) {
        throw std::invalid_argument("leaf_pairs: factor count does not match the tree");
    }
    std::vector<FactorPair> leaves;
    leaves.reserve(tree.leaf_count());
    for (const auto& members : tree.leaf_members()) {
        std::vector<FactorPair> batch;
        batch.reserve(members.size());
        for (const std::size_t i : members) {
            batch.push_back(factors[i]);
        }
        leaves.push_back(FactorPair::product(batch));
    }
    return leaves;
}

//! DCBF over the factors, batched according to the tree.
inline FlipOutcome flip_dcbf(const PartitionTree& tree, const std::vector<FactorPair>& factors,
                             const PortkeyConfig& portkey, RandomStream& stream, CostLedger& ledger,
                             const DcbfOptions& options = {}) {
    return flip_dcbf(tree.depth(), leaf_pairs(tree, factors), portkey, stream, ledger, options);
}

struct Overhead {
    double omega;  //!< 2-coin outputs per root flip
    double phi;    //!< 2-coin loops per root flip
};

inline Overhead measure_overhead(const CostLedger& ledger) {
    if (ledger.root_flips == 0) {
        throw std::invalid_argument("measure_overhead: ledger holds no completed root flips");
    }
    const auto flips = static_cast<double>(ledger.root_flips);
    return {static_cast<double>(ledger.leaf_outputs) / flips, static_cast<double>(ledger.leaf_loops) / flips};
}

}  // namespace dcbf
