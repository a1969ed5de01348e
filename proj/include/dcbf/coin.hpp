// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dcbf/rng.hpp"

namespace dcbf {

//---------------------------------------------------------------------------//
// Errors
//---------------------------------------------------------------------------//

//! Both sides of a 2-coin have zero weight.
class DegenerateInput : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

//! A factory exceeded its loop or flip budget.
class LoopCapExceeded : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

//! A path left the bounding rectangle of a Poisson coin.
class BoundViolation : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

//! A rejection sampler hit its proposal cap.
class RejectionCapExceeded : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

//---------------------------------------------------------------------------//
// Outcomes and cost accounting
//---------------------------------------------------------------------------//

enum class FlipOutcome : std::uint8_t { Tails = 0, Heads = 1, Escaped = 2 };

inline char to_char(FlipOutcome o) {
    switch (o) {
        case FlipOutcome::Heads: return 'H';
        case FlipOutcome::Tails: return 'T';
        case FlipOutcome::Escaped: return 'E';
    }
    return '?';
}

inline FlipOutcome outcome_from_bit(bool bit) { return bit ? FlipOutcome::Heads : FlipOutcome::Tails; }

/*!
 * Loop and flip counters for factory invocations.
 *
 * node_loops is heap-indexed over the partition tree: node 1 is the root and
 * node k has children 2k and 2k+1. Entries at leaf nodes count 2-coin loops,
 * entries at internal nodes count merge loops.
 */
struct CostLedger {
    std::uint64_t root_flips = 0;    //!< completed root invocations
    std::uint64_t leaf_outputs = 0;  //!< 2-coin outputs (omega numerator)
    std::uint64_t leaf_loops = 0;    //!< 2-coin loops (phi numerator)
    std::uint64_t leaf_flips = 0;    //!< elementary p-coin flips
    std::uint64_t merge_loops = 0;
    std::uint64_t path_evaluations = 0;  //!< Poisson-coin integrand evaluations
    std::int64_t elapsed_ns = 0;
    std::vector<std::uint64_t> node_loops;

    void count_node_loop(std::size_t node) {
        if (node >= node_loops.size()) {
            node_loops.resize(node + 1, 0);
        }
        ++node_loops[node];
    }

    void merge(const CostLedger& other) {
        root_flips += other.root_flips;
        leaf_outputs += other.leaf_outputs;
        leaf_loops += other.leaf_loops;
        leaf_flips += other.leaf_flips;
        merge_loops += other.merge_loops;
        path_evaluations += other.path_evaluations;
        elapsed_ns += other.elapsed_ns;
        if (other.node_loops.size() > node_loops.size()) {
            node_loops.resize(other.node_loops.size(), 0);
        }
        for (std::size_t i = 0; i < other.node_loops.size(); ++i) {
            node_loops[i] += other.node_loops[i];
        }
    }

    void reset() { *this = CostLedger{}; }
};

//---------------------------------------------------------------------------//
// Weighted coin
//---------------------------------------------------------------------------//

//! Procedure drawing one Bernoulli(p) outcome for an unknown p.
using FlipFn = std::function<bool(RandomStream&, CostLedger&)>;

/*!
 * A tractable scale c paired with a p-coin, representing the quantity c * p.
 *
 * The scale is stored on the log axis since products of many factor bounds
 * overflow quickly; c = 0 is log_scale = -inf.
 */
class WeightedCoin {
  public:
    WeightedCoin() = default;

    static WeightedCoin from_log_scale(double log_scale, FlipFn flip) {
        if (std::isnan(log_scale) || log_scale == std::numeric_limits<double>::infinity()) {
            throw std::domain_error("WeightedCoin: log scale must be finite or -inf");
        }
        WeightedCoin coin;
        coin.log_scale_ = log_scale;
        coin.flip_ = std::move(flip);
        return coin;
    }

    static WeightedCoin from_scale(double scale, FlipFn flip) {
        if (!(scale >= 0.0) || std::isinf(scale)) {
            throw std::domain_error("WeightedCoin: scale must be finite and nonnegative");
        }
        return from_log_scale(std::log(scale), std::move(flip));
    }

    //! Coin with a known probability; each flip counts as one elementary flip.
    static WeightedCoin known(double scale, double p) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw std::domain_error("WeightedCoin: probability outside [0, 1]");
        }
        return from_scale(scale, [p](RandomStream& s, CostLedger& ledger) {
            ++ledger.leaf_flips;
            return bernoulli(s, p);
        });
    }

    //! Coin that always lands heads at no cost.
    static WeightedCoin certain(double log_scale) {
        return from_log_scale(log_scale, [](RandomStream&, CostLedger&) { return true; });
    }

    double log_scale() const { return log_scale_; }
    double scale() const { return std::exp(log_scale_); }
    bool is_zero() const { return log_scale_ == -std::numeric_limits<double>::infinity(); }

    bool flip(RandomStream& stream, CostLedger& ledger) const { return flip_(stream, ledger); }

    //! The coin representing the product of two coins: scales multiply and the
    //! p-coin is the conjunction of independent flips (left first).
    friend WeightedCoin operator*(const WeightedCoin& a, const WeightedCoin& b) {
        return from_log_scale(a.log_scale_ + b.log_scale_,
                              [fa = a.flip_, fb = b.flip_](RandomStream& s, CostLedger& ledger) {
                                  return fa(s, ledger) && fb(s, ledger);
                              });
    }

  private:
    double log_scale_ = -std::numeric_limits<double>::infinity();
    FlipFn flip_ = [](RandomStream&, CostLedger&) { return false; };
};

//! Conjunction of many coins with short-circuit evaluation.
inline WeightedCoin product(std::vector<WeightedCoin> coins) {
    double log_scale = 0.0;
    for (const auto& c : coins) {
        log_scale += c.log_scale();
    }
    if (coins.size() == 1) {
        return coins.front();
    }
    return WeightedCoin::from_log_scale(
        log_scale, [coins = std::move(coins)](RandomStream& s, CostLedger& ledger) {
            for (const auto& c : coins) {
                if (!c.flip(s, ledger)) {
                    return false;
                }
            }
            return true;
        });
}

}  // namespace dcbf
