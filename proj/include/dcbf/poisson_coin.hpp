// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dcbf/coin.hpp"
#include "dcbf/rng.hpp"

namespace dcbf {

/*!
 * A path w on [0, horizon] known to stay inside [lower, upper].
 *
 * eval may have side effects (lazy extension of a stochastic path); it is
 * called with nondecreasing times within one coin flip.
 */
struct BoundedPath {
    std::function<double(double)> eval;
    double lower = 0.0;
    double upper = 0.0;
    double horizon = 0.0;

    //! Mean number of Poisson points, T (upper - lower).
    double intensity() const { return horizon * (upper - lower); }

    void validate() const {
        if (!(horizon >= 0.0) || !(upper >= lower) || !std::isfinite(upper) || !std::isfinite(lower)) {
            throw std::invalid_argument("BoundedPath: need horizon >= 0 and finite lower <= upper");
        }
    }
};

struct PoissonPoint {
    double t;  //!< time in [0, horizon]
    double a;  //!< height in [0, upper - lower]
};

namespace detail {

inline double evaluate_checked(const BoundedPath& path, double t, CostLedger& ledger) {
    const double w = path.eval(t);
    ++ledger.path_evaluations;
    const double tol = 1e-12 * std::max({1.0, std::abs(path.lower), std::abs(path.upper)});
    if (!(w >= path.lower - tol && w <= path.upper + tol)) {
        std::ostringstream msg;
        msg.precision(17);
        msg << "Poisson coin: path value " << w << " at t=" << t << " outside [" << path.lower << ", " << path.upper
            << "]";
        throw BoundViolation(msg.str());
    }
    return w;
}

inline std::vector<PoissonPoint> uniform_points(const BoundedPath& path, long long count, RandomStream& stream) {
    std::vector<PoissonPoint> points(static_cast<std::size_t>(count));
    const double height = path.upper - path.lower;
    for (auto& p : points) {
        p.t = path.horizon * stream.uniform();
        p.a = height * stream.uniform();
    }
    std::sort(points.begin(), points.end(), [](const PoissonPoint& x, const PoissonPoint& y) { return x.t < y.t; });
    return points;
}

//! True when no point lies in the epigraph {a <= w_t - lower}. Every point
//! is evaluated, in ascending time order.
inline bool epigraph_empty(const BoundedPath& path, const std::vector<PoissonPoint>& points, CostLedger& ledger) {
    bool empty = true;
    for (const auto& p : points) {
        const double w = evaluate_checked(path, p.t, ledger);
        if (p.a <= w - path.lower) {
            empty = false;
        }
    }
    return empty;
}

inline long long poisson_count(double mean, RandomStream& stream) {
    if (mean <= 0.0) {
        return 0;
    }
    std::poisson_distribution<long long> dist(mean);
    return dist(stream);
}

}  // namespace detail

/*!
 * Poisson coin: returns true with probability exp(-int_0^T (w_t - lower) dt).
 *
 * Draws a unit-rate Poisson process on [0, T] x [0, upper - lower] and
 * reports whether it misses the epigraph of w - lower. The path is evaluated
 * once per point, so the mean number of evaluations is T (upper - lower).
 */
inline bool flip_poisson_coin(const BoundedPath& path, RandomStream& stream, CostLedger& ledger) {
    path.validate();
    ++ledger.leaf_flips;
    const long long count = detail::poisson_count(path.intensity(), stream);
    if (count == 0) {
        return true;
    }
    return detail::epigraph_empty(path, detail::uniform_points(path, count, stream), ledger);
}

//! Weighted coin whose p-coin is a Poisson coin on the given path.
inline WeightedCoin poisson_weighted_coin(double log_scale, BoundedPath path) {
    return WeightedCoin::from_log_scale(log_scale, [path = std::move(path)](RandomStream& s, CostLedger& ledger) {
        return flip_poisson_coin(path, s, ledger);
    });
}

struct BatchResult {
    std::optional<std::size_t> index;  //!< first coin with a non-empty Poisson process; empty if none
    bool bit = true;                   //!< outcome of that coin
};

/*!
 * Skips ahead to the first coin in `paths` whose Poisson process is
 * non-empty. All coins before it are heads. The index is geometric with
 * success probability 1 - exp(-lambda); the chosen coin is then flipped with
 * a process conditioned to be non-empty. Equivalent in law to flipping the
 * coins one by one.
 */
inline BatchResult batch_first_success(const std::vector<BoundedPath>& paths, std::size_t start, RandomStream& stream,
                                       CostLedger& ledger) {
    if (start >= paths.size()) {
        return {};
    }
    const double lambda = paths[start].intensity();
    for (std::size_t i = start; i < paths.size(); ++i) {
        paths[i].validate();
        if (std::abs(paths[i].intensity() - lambda) > 1e-12 * std::max(1.0, lambda)) {
            throw std::invalid_argument("batch_first_success: paths must share one intensity bound");
        }
    }
    if (lambda <= 0.0) {
        return {};
    }
    const double skip = std::floor(standard_exponential(stream) / lambda);
    if (skip >= static_cast<double>(paths.size() - start)) {
        return {};
    }
    const std::size_t index = start + static_cast<std::size_t>(skip);
    ledger.leaf_flips += static_cast<std::uint64_t>(skip) + 1;

    // Zero-truncated count: the first point of a unit-rate process on
    // [0, lambda] given that one exists, plus a Poisson count after it.
    const double first = -std::log1p(-stream.uniform() * -std::expm1(-lambda));
    const long long count = 1 + detail::poisson_count(lambda - first, stream);
    const auto& path = paths[index];
    return {index, detail::epigraph_empty(path, detail::uniform_points(path, count, stream), ledger)};
}

inline BatchResult batch_first_success(const std::vector<BoundedPath>& paths, RandomStream& stream,
                                       CostLedger& ledger) {
    return batch_first_success(paths, 0, stream, ledger);
}

//! Index of the first tails among the coins, using batch_first_success to
//! skip runs of empty processes.
inline std::optional<std::size_t> first_tails_batched(const std::vector<BoundedPath>& paths, RandomStream& stream,
                                                      CostLedger& ledger) {
    std::size_t start = 0;
    while (start < paths.size()) {
        const BatchResult r = batch_first_success(paths, start, stream, ledger);
        if (!r.index) {
            return std::nullopt;
        }
        if (!r.bit) {
            return r.index;
        }
        start = *r.index + 1;
    }
    return std::nullopt;
}

//! Same as first_tails_batched by flipping every coin in turn.
inline std::optional<std::size_t> first_tails_sequential(const std::vector<BoundedPath>& paths, RandomStream& stream,
                                                         CostLedger& ledger) {
    for (std::size_t i = 0; i < paths.size(); ++i) {
        if (!flip_poisson_coin(paths[i], stream, ledger)) {
            return i;
        }
    }
    return std::nullopt;
}

}  // namespace dcbf
