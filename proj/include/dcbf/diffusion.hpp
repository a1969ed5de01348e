// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <future>
#include <istream>
#include <iterator>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dcbf/coin.hpp"
#include "dcbf/csv.hpp"
#include "dcbf/factories.hpp"
#include "dcbf/mcmc.hpp"
#include "dcbf/partition.hpp"
#include "dcbf/poisson_coin.hpp"
#include "dcbf/rng.hpp"

namespace dcbf {

/*!
 * Unit-volatility diffusion dX = tanh(theta - X) dt + dW.
 *
 * With u = theta - a: drift tanh(u), potential B(a) = -log cosh(u) and
 * phi(a) = (drift^2 + drift') / 2 = (tanh^2 u - sech^2 u) / 2 = tanh^2 u - 1/2.
 */
struct TanhModel {
    double theta = 0.0;

    static constexpr double phi_lower = -0.5;
    static constexpr double phi_upper = 0.5;
    //! sup over theta, a of |d phi / d theta| = 2 tanh sech^2, attained at tanh^2 = 1/3.
    static constexpr double dphi_bound = 0.76980035891950104;  // 4 / (3 sqrt 3)

    double drift(double x) const { return std::tanh(theta - x); }

    double potential(double x) const {
        const double u = std::abs(theta - x);
        return -(u + std::log1p(std::exp(-2.0 * u)) - std::log(2.0));
    }

    double phi(double x) const {
        const double t = std::tanh(theta - x);
        return t * t - 0.5;
    }

    double dphi_dtheta(double x) const {
        const double t = std::tanh(theta - x);
        return 2.0 * t * (1.0 - t * t);
    }

    //! sech(theta - x) = exp(B(x)), the endpoint acceptance weight.
    double sech(double x) const { return 1.0 / std::cosh(theta - x); }
};

//---------------------------------------------------------------------------//
// Data
//---------------------------------------------------------------------------//

struct DiffusionDataset {
    std::vector<double> times;
    std::vector<double> values;

    //! Number of observation intervals.
    std::size_t intervals() const { return times.empty() ? 0 : times.size() - 1; }

    void validate() const {
        if (times.size() != values.size() || times.empty()) {
            throw std::invalid_argument("DiffusionDataset: need matching non-empty times and values");
        }
        for (std::size_t i = 0; i < times.size(); ++i) {
            if (!std::isfinite(times[i]) || !std::isfinite(values[i])) {
                throw std::invalid_argument("DiffusionDataset: non-finite entry at row " + std::to_string(i));
            }
            if (i > 0 && !(times[i] > times[i - 1])) {
                throw std::invalid_argument("DiffusionDataset: times must increase strictly");
            }
        }
    }

    //! Common spacing if the grid is regular (relative tolerance 1e-9).
    std::optional<double> regular_spacing() const {
        if (intervals() == 0) {
            return std::nullopt;
        }
        const double dt = (times.back() - times.front()) / static_cast<double>(intervals());
        for (std::size_t i = 1; i < times.size(); ++i) {
            if (std::abs(times[i] - times[i - 1] - dt) > 1e-9 * dt) {
                return std::nullopt;
            }
        }
        return dt;
    }
};

inline DiffusionDataset read_diffusion_csv(std::istream& in) {
    DiffusionDataset data;
    for (const auto& row : detail::read_numeric_csv(in, {"t", "x"})) {
        data.times.push_back(row[0]);
        data.values.push_back(row[1]);
    }
    data.validate();
    return data;
}

inline void write_diffusion_csv(std::ostream& out, const DiffusionDataset& data) {
    out << "t,x\n";
    for (std::size_t i = 0; i < data.times.size(); ++i) {
        out << format_double(data.times[i]) << ',' << format_double(data.values[i]) << '\n';
    }
}

//---------------------------------------------------------------------------//
// Bridges
//---------------------------------------------------------------------------//

/*!
 * A Brownian-bridge skeleton on [0, duration] pinned at x0 and x1.
 *
 * Interior values are revealed on demand: a new time s is drawn from the
 * Brownian bridge between its nearest revealed neighbours, so all revealed
 * points are jointly a Brownian bridge. The segment owns the stream used for
 * these draws.
 */
class BridgeSegment {
  public:
    BridgeSegment(double duration, double x0, double x1, RandomStream stream)
        : duration_(duration), stream_(std::move(stream)) {
        if (!(duration > 0.0) || !std::isfinite(x0) || !std::isfinite(x1)) {
            throw std::invalid_argument("BridgeSegment: need positive duration and finite endpoints");
        }
        points_.emplace(0.0, x0);
        points_.emplace(duration, x1);
    }

    double duration() const { return duration_; }
    double start_value() const { return points_.begin()->second; }
    double end_value() const { return points_.rbegin()->second; }
    const std::map<double, double>& skeleton() const { return points_; }

    double value_at(double s) {
        if (!(s >= 0.0 && s <= duration_)) {
            throw std::out_of_range("BridgeSegment::value_at: time outside the segment");
        }
        const auto hi = points_.lower_bound(s);
        if (hi->first == s) {
            return hi->second;
        }
        const auto lo = std::prev(hi);
        const double a = lo->first;
        const double b = hi->first;
        const double mean = lo->second + (s - a) / (b - a) * (hi->second - lo->second);
        const double var = (s - a) * (b - s) / (b - a);
        std::normal_distribution<double> normal(mean, std::sqrt(var));
        const double x = normal(stream_);
        points_.emplace_hint(hi, s, x);
        return x;
    }

  private:
    double duration_;
    std::map<double, double> points_;
    RandomStream stream_;
};

//! Poisson-coin path phi(x_s) on the segment; heads with probability
//! exp(-int (phi - phi_lower)).
inline BoundedPath phi_path(const TanhModel& model, BridgeSegment& segment) {
    return {[model, seg = &segment](double s) { return model.phi(seg->value_at(s)); }, TanhModel::phi_lower,
            TanhModel::phi_upper, segment.duration()};
}

/*!
 * Exact draw of the tanh diffusion bridge from x0 to x1 over `duration`.
 *
 * Proposes Brownian bridges and accepts with the Poisson coin on phi; the
 * accepted skeleton keeps the points revealed by the coin.
 */
inline BridgeSegment sample_bridge(double duration, double x0, double x1, double theta, RandomStream& stream,
                                   CostLedger& ledger, std::uint64_t max_proposals = 1'000'000,
                                   std::uint64_t* proposals = nullptr) {
    const TanhModel model{theta};
    for (std::uint64_t k = 1; k <= max_proposals; ++k) {
        BridgeSegment segment(duration, x0, x1, stream.fork());
        if (flip_poisson_coin(phi_path(model, segment), stream, ledger)) {
            if (proposals != nullptr) *proposals += k;
            return segment;
        }
    }
    throw RejectionCapExceeded("sample_bridge: no acceptance after " + std::to_string(max_proposals) +
                               " proposals (x0=" + std::to_string(x0) + ", x1=" + std::to_string(x1) + ")");
}

/*!
 * Exact draw of X_dt given X_0 = x by retrospective rejection: propose
 * y ~ N(x, dt), accept with sech(theta - y) = exp(B(y)), then accept the
 * Brownian bridge from x to y with the Poisson coin on phi.
 */
inline double sample_tanh_transition(double theta, double x, double dt, RandomStream& stream, CostLedger& ledger,
                                     std::uint64_t max_proposals = 1'000'000) {
    const TanhModel model{theta};
    std::normal_distribution<double> step(0.0, std::sqrt(dt));
    for (std::uint64_t k = 0; k < max_proposals; ++k) {
        const double y = x + step(stream);
        if (!bernoulli(stream, model.sech(y))) {
            continue;
        }
        BridgeSegment segment(dt, x, y, stream.fork());
        if (flip_poisson_coin(phi_path(model, segment), stream, ledger)) {
            return y;
        }
    }
    throw RejectionCapExceeded("sample_tanh_transition: no acceptance after " + std::to_string(max_proposals) +
                               " proposals from x=" + std::to_string(x));
}

//! Observations of the tanh diffusion at `times`, started at x0 at times[0].
inline DiffusionDataset simulate_tanh_path(double theta, const std::vector<double>& times, double x0,
                                           RandomStream& stream, std::uint64_t max_proposals = 1'000'000) {
    DiffusionDataset data;
    data.times = times;
    if (times.empty()) {
        return data;
    }
    CostLedger ledger;
    data.values.push_back(x0);
    for (std::size_t i = 1; i < times.size(); ++i) {
        data.values.push_back(
            sample_tanh_transition(theta, data.values.back(), times[i] - times[i - 1], stream, ledger, max_proposals));
    }
    data.validate();
    return data;
}

//! Times 0, dt, ..., n dt.
inline std::vector<double> regular_times(std::size_t n, double dt) {
    std::vector<double> t(n + 1);
    for (std::size_t i = 0; i <= n; ++i) {
        t[i] = static_cast<double>(i) * dt;
    }
    return t;
}

//---------------------------------------------------------------------------//
// Girsanov factors
//---------------------------------------------------------------------------//

//! One side c * p of a segment's odds: log c and the path of the p-coin.
struct GirsanovSide {
    double log_scale;
    BoundedPath path;
};

/*!
 * Side for parameter `value` against `other` on a path x over [0, duration]:
 * c = exp(B_value(x1) - B_value(x0)) * prior(value)^share and p-coin
 * exp(-int max(0, phi_value - phi_other)(x_s) ds).
 */
template <class PathValue>
GirsanovSide girsanov_side(PathValue x_at, double x0, double x1, double duration, double value, double other,
                           double prior_share, double prior_sd) {
    const TanhModel m{value};
    const TanhModel o{other};
    const double log_c = m.potential(x1) - m.potential(x0) - prior_share * value * value / (2.0 * prior_sd * prior_sd);
    BoundedPath path{[m, o, x_at = std::move(x_at)](double s) {
                         const double x = x_at(s);
                         return std::max(0.0, m.phi(x) - o.phi(x));
                     },
                     0.0, std::abs(value - other) * TanhModel::dphi_bound, duration};
    return {log_c, std::move(path)};
}

inline GirsanovSide girsanov_side(BridgeSegment& segment, double value, double other, double prior_share,
                                  double prior_sd) {
    return girsanov_side([seg = &segment](double s) { return seg->value_at(s); }, segment.start_value(),
                         segment.end_value(), segment.duration(), value, other, prior_share, prior_sd);
}

/*!
 * Odds of segment likelihood times prior share for proposed vs current.
 * The ratio of the two sides equals the complete-data likelihood ratio of the
 * segment times (prior(proposed) / prior(current))^share.
 */
inline FactorPair girsanov_leaf_pair(BridgeSegment& segment, double current, double proposed, double prior_share,
                                     double prior_sd = 1.0) {
    GirsanovSide n = girsanov_side(segment, proposed, current, prior_share, prior_sd);
    GirsanovSide d = girsanov_side(segment, current, proposed, prior_share, prior_sd);
    return {poisson_weighted_coin(n.log_scale, std::move(n.path)),
            poisson_weighted_coin(d.log_scale, std::move(d.path))};
}

//---------------------------------------------------------------------------//
// Sampler
//---------------------------------------------------------------------------//

struct DiffusionConfig {
    double delta = 8.0;                 //!< proposal half-width is delta / sqrt(n)
    std::optional<double> leaf_escape;  //!< per-loop escape at leaves; default 1/n
    std::optional<int> depth;           //!< default floor(log4 n)
    double prior_sd = 1.0;
    bool batched = false;  //!< skip runs of empty Poisson processes at the leaves
    bool parallel = false;
    DcbfOptions dcbf;
    std::uint64_t max_bridge_proposals = 1'000'000;

    int resolved_depth(std::size_t n) const { return depth.value_or(default_depth(n)); }

    PortkeyConfig resolved_portkey(std::size_t n) const {
        const double escape = leaf_escape.value_or(n > 1 ? 1.0 / static_cast<double>(n) : 0.0);
        return PortkeyConfig::leaf_escape(escape);
    }
};

struct DiffusionState {
    double theta = 0.0;
    std::vector<BridgeSegment> bridges;
};

struct DiffusionSweep {
    FlipOutcome outcome;
    double proposal;
    std::uint64_t bridge_proposals = 0;
};

//! Redraws every bridge exactly under theta; segment i uses split(i) of a
//! stream forked from `stream`, so the result does not depend on threading.
inline void refresh_bridges(DiffusionState& state, const DiffusionDataset& data, RandomStream& stream,
                            bool parallel, std::uint64_t max_proposals, std::uint64_t* proposals = nullptr) {
    const std::size_t n = data.intervals();
    const RandomStream base = stream.fork();
    std::vector<std::optional<BridgeSegment>> fresh(n);
    std::vector<std::uint64_t> counts(n, 0);
    auto work = [&](std::size_t begin, std::size_t end) {
        CostLedger ledger;
        for (std::size_t i = begin; i < end; ++i) {
            RandomStream s = base.split(i);
            fresh[i].emplace(sample_bridge(data.times[i + 1] - data.times[i], data.values[i], data.values[i + 1],
                                           state.theta, s, ledger, max_proposals, &counts[i]));
        }
    };
    const std::size_t threads = parallel ? std::max(1u, std::thread::hardware_concurrency()) : 1;
    if (threads == 1 || n < 2 * threads) {
        work(0, n);
    } else {
        std::vector<std::future<void>> jobs;
        const std::size_t chunk = (n + threads - 1) / threads;
        for (std::size_t b = 0; b < n; b += chunk) {
            jobs.push_back(std::async(std::launch::async, work, b, std::min(n, b + chunk)));
        }
        for (auto& j : jobs) j.get();
    }
    state.bridges.clear();
    state.bridges.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        state.bridges.push_back(std::move(*fresh[i]));
        if (proposals != nullptr) *proposals += counts[i];
    }
}

inline DiffusionState initial_diffusion_state(const DiffusionDataset& data, double theta, RandomStream& stream,
                                              const DiffusionConfig& config = {}) {
    data.validate();
    if (data.intervals() == 0) {
        throw std::invalid_argument("initial_diffusion_state: need at least one interval");
    }
    DiffusionState state;
    state.theta = theta;
    refresh_bridges(state, data, stream, config.parallel, config.max_bridge_proposals);
    return state;
}

namespace detail {

//! Leaf odds whose p-coins find the first tails by skipping empty processes.
inline std::vector<FactorPair> batched_girsanov_leaves(const PartitionTree& tree, DiffusionState& state,
                                                       double current, double proposed, double share,
                                                       double prior_sd) {
    std::vector<FactorPair> leaves;
    for (const auto& members : tree.leaf_members()) {
        double log_n = 0.0;
        double log_d = 0.0;
        std::vector<BoundedPath> paths_n;
        std::vector<BoundedPath> paths_d;
        for (const std::size_t i : members) {
            GirsanovSide n = girsanov_side(state.bridges[i], proposed, current, share, prior_sd);
            GirsanovSide d = girsanov_side(state.bridges[i], current, proposed, share, prior_sd);
            log_n += n.log_scale;
            log_d += d.log_scale;
            paths_n.push_back(std::move(n.path));
            paths_d.push_back(std::move(d.path));
        }
        auto coin = [](double log_c, std::vector<BoundedPath> paths) {
            return WeightedCoin::from_log_scale(log_c, [paths = std::move(paths)](RandomStream& s, CostLedger& l) {
                return !first_tails_batched(paths, s, l).has_value();
            });
        };
        leaves.push_back({coin(log_n, std::move(paths_n)), coin(log_d, std::move(paths_d))});
    }
    return leaves;
}

}  // namespace detail

/*!
 * One Barker-within-Gibbs sweep: exact redraw of all bridges under the
 * current theta, then a DCBF Barker update of theta given the full path.
 * `ledger` accumulates the cost of the theta update only.
 */
inline DiffusionSweep gibbs_sweep_diffusion(DiffusionState& state, const DiffusionDataset& data,
                                            const DiffusionConfig& config, const PartitionTree& tree,
                                            RandomStream& stream, RandomStream& shuffle_stream, CostLedger& ledger) {
    const std::size_t n = data.intervals();
    if (tree.size() != n) {
        throw std::invalid_argument("gibbs_sweep_diffusion: tree size does not match the data");
    }
    DiffusionSweep result{FlipOutcome::Tails, state.theta, 0};
    refresh_bridges(state, data, stream, config.parallel, config.max_bridge_proposals, &result.bridge_proposals);

    const double current = state.theta;
    const UniformProposal proposal = scaled_proposal(config.delta, n);
    const double share = 1.0 / static_cast<double>(n);
    const PortkeyConfig portkey = config.resolved_portkey(n);
    DcbfOptions options = config.dcbf;
    options.parallel = options.parallel || config.parallel;

    if (config.batched) {
        if (!data.regular_spacing()) {
            throw std::invalid_argument("gibbs_sweep_diffusion: batching needs a regular time grid");
        }
        result.proposal = proposal.draw(current, stream);
        const PartitionTree shuffled = tree.shuffled(shuffle_stream);
        const auto leaves =
            detail::batched_girsanov_leaves(shuffled, state, current, result.proposal, share, config.prior_sd);
        result.outcome = flip_dcbf(shuffled.depth(), leaves, portkey, stream, ledger, options);
    } else {
        auto make = [&](double cur, double prop) {
            std::vector<FactorPair> factors;
            factors.reserve(n);
            for (auto& seg : state.bridges) {
                factors.push_back(girsanov_leaf_pair(seg, cur, prop, share, config.prior_sd));
            }
            return factors;
        };
        const BarkerResult r = barker_step(current, make, proposal, tree, portkey, stream, shuffle_stream, ledger, options);
        result.proposal = r.proposal;
        result.outcome = r.outcome;
    }
    if (result.outcome == FlipOutcome::Heads) {
        state.theta = result.proposal;
    }
    return result;
}

/*!
 * Runs the sampler for chain.iterations sweeps from theta = chain-independent
 * start `theta0`. time_ns is the wall time of the theta update when
 * record_time is set and 0 otherwise.
 */
inline ChainTrace run_diffusion_chain(const DiffusionDataset& data, const DiffusionConfig& config,
                                      const ChainConfig& chain, double theta0, bool record_time = false) {
    chain.validate();
    RandomStream root(chain.seed);
    RandomStream stream = root.split(0);
    RandomStream shuffle_stream = root.split(1);
    DiffusionState state = initial_diffusion_state(data, theta0, stream, config);
    const PartitionTree tree = build_tree(data.intervals(), config.resolved_depth(data.intervals()));
    ChainTrace trace;
    trace.num_params = 1;
    trace.rows.reserve(chain.iterations / chain.thinning);
    CostLedger ledger;
    for (std::size_t it = 0; it < chain.iterations; ++it) {
        const CostLedger before = ledger;
        const DiffusionSweep sweep = gibbs_sweep_diffusion(state, data, config, tree, stream, shuffle_stream, ledger);
        if (it % chain.thinning != 0) continue;
        TraceRow row;
        row.iter = it;
        row.theta = {state.theta};
        row.outcome = sweep.outcome;
        row.leaf_outputs = ledger.leaf_outputs - before.leaf_outputs;
        row.leaf_loops = ledger.leaf_loops - before.leaf_loops;
        row.merge_loops = ledger.merge_loops - before.merge_loops;
        row.time_ns = record_time ? ledger.elapsed_ns - before.elapsed_ns : 0;
        trace.rows.push_back(std::move(row));
    }
    return trace;
}

}  // namespace dcbf
