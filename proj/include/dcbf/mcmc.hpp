// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcbf/coin.hpp"
#include "dcbf/factories.hpp"
#include "dcbf/partition.hpp"
#include "dcbf/rng.hpp"

namespace dcbf {

//! Symmetric proposal Unif(current +- half_width).
struct UniformProposal {
    double half_width;

    double draw(double current, RandomStream& stream) const {
        return current + half_width * (2.0 * stream.uniform() - 1.0);
    }
};

//! Half-width delta / sqrt(n), the posterior-concentration scaling.
inline UniformProposal scaled_proposal(double delta, std::size_t n) {
    if (!(delta > 0.0) || n == 0) {
        throw std::invalid_argument("scaled_proposal: need delta > 0 and n > 0");
    }
    return {delta / std::sqrt(static_cast<double>(n))};
}

struct ChainConfig {
    std::size_t iterations = 10000;
    std::size_t burn_in = 0;
    double delta = 8.0;
    PortkeyConfig portkey;
    int depth = 0;
    std::uint64_t seed = 1;
    std::size_t thinning = 1;

    void validate() const {
        if (iterations <= burn_in) {
            throw std::invalid_argument("ChainConfig: iterations must exceed burn-in");
        }
        if (!(delta > 0.0)) {
            throw std::invalid_argument("ChainConfig: delta must be positive");
        }
        if (thinning == 0) {
            throw std::invalid_argument("ChainConfig: thinning must be positive");
        }
        portkey.validate();
    }
};

struct BarkerResult {
    double value;      //!< state after the step
    double proposal;
    FlipOutcome outcome;
};

/*!
 * One Barker update through the DCBF.
 *
 * proposal.draw(current, stream) must be a symmetric proposal.
 * make_factors(current, proposal) returns the factor pairs whose odds multiply
 * to the posterior odds; an empty vector means the proposal has zero
 * posterior mass and is rejected outright. The partition is reshuffled from
 * shuffle_stream before the flip. Tails and Escaped both reject.
 */
template <class PairFactory, class Proposal = UniformProposal>
BarkerResult barker_step(double current, PairFactory&& make_factors, const Proposal& proposal,
                         const PartitionTree& tree, const PortkeyConfig& portkey, RandomStream& stream,
                         RandomStream& shuffle_stream, CostLedger& ledger, const DcbfOptions& options = {}) {
    const double candidate = proposal.draw(current, stream);
    const PartitionTree shuffled = tree.shuffled(shuffle_stream);
    const std::vector<FactorPair> factors = make_factors(current, candidate);
    if (factors.empty()) {
        return {current, candidate, FlipOutcome::Tails};
    }
    const FlipOutcome outcome = flip_dcbf(shuffled, factors, portkey, stream, ledger, options);
    return {outcome == FlipOutcome::Heads ? candidate : current, candidate, outcome};
}

//---------------------------------------------------------------------------//
// Diagnostics
//---------------------------------------------------------------------------//

namespace detail {

inline double mean_of(std::span<const double> x) {
    double s = 0.0;
    for (const double v : x) {
        s += v;
    }
    return s / static_cast<double>(x.size());
}

inline double autocovariance(std::span<const double> x, double mean, std::size_t lag) {
    double s = 0.0;
    for (std::size_t t = 0; t + lag < x.size(); ++t) {
        s += (x[t] - mean) * (x[t + lag] - mean);
    }
    return s / static_cast<double>(x.size());
}

}  // namespace detail

//! Sample autocorrelation at the given lag (biased autocovariance estimator).
inline double acf(std::span<const double> trace, std::size_t lag) {
    if (trace.size() < std::max<std::size_t>(2, 10 * lag)) {
        throw std::invalid_argument("acf: trace shorter than 10 * lag");
    }
    const double m = detail::mean_of(trace);
    const double c0 = detail::autocovariance(trace, m, 0);
    if (!(c0 > 0.0)) {
        throw std::domain_error("acf: constant trace");
    }
    return detail::autocovariance(trace, m, lag) / c0;
}

//! Effective sample size with Geyer's initial positive sequence truncation.
inline double ess(std::span<const double> trace) {
    const std::size_t n = trace.size();
    if (n < 4) {
        throw std::invalid_argument("ess: trace too short");
    }
    const double m = detail::mean_of(trace);
    const double c0 = detail::autocovariance(trace, m, 0);
    if (!(c0 > 0.0)) {
        throw std::domain_error("ess: constant trace");
    }
    double pair_sum = 0.0;
    for (std::size_t k = 0; 2 * k + 1 < n; ++k) {
        const double rho_even = detail::autocovariance(trace, m, 2 * k) / c0;
        const double rho_odd = detail::autocovariance(trace, m, 2 * k + 1) / c0;
        const double gamma = rho_even + rho_odd;
        if (!(gamma > 0.0)) {
            break;
        }
        pair_sum += gamma;
    }
    const double tau = std::max(-1.0 + 2.0 * pair_sum, 1.0 / static_cast<double>(n));
    return static_cast<double>(n) / tau;
}

//---------------------------------------------------------------------------//
// Traces
//---------------------------------------------------------------------------//

struct TraceRow {
    std::size_t iter = 0;
    std::vector<double> theta;
    FlipOutcome outcome = FlipOutcome::Tails;
    std::uint64_t leaf_outputs = 0;
    std::uint64_t leaf_loops = 0;
    std::uint64_t merge_loops = 0;
    std::int64_t time_ns = 0;
};

struct ChainTrace {
    std::size_t num_params = 1;
    std::vector<TraceRow> rows;

    std::vector<double> column(std::size_t param, std::size_t from_iter = 0) const {
        std::vector<double> out;
        out.reserve(rows.size());
        for (const auto& r : rows) {
            if (r.iter >= from_iter) {
                out.push_back(r.theta.at(param));
            }
        }
        return out;
    }

    double acceptance_rate(std::size_t from_iter = 0) const {
        std::size_t accepted = 0;
        std::size_t total = 0;
        for (const auto& r : rows) {
            if (r.iter >= from_iter) {
                ++total;
                accepted += r.outcome == FlipOutcome::Heads ? 1 : 0;
            }
        }
        return total == 0 ? 0.0 : static_cast<double>(accepted) / static_cast<double>(total);
    }
};

//! Shortest decimal that round-trips to the same double.
inline std::string format_double(double v) {
    if (std::isnan(v)) {
        return "nan";
    }
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline void write_trace_csv(std::ostream& out, const ChainTrace& trace) {
    out << "iter,theta_1";
    for (std::size_t k = 1; k < trace.num_params; ++k) {
        out << ",theta_" << (k + 1);
    }
    out << ",outcome,leaf_outputs,leaf_loops,merge_loops,time_ns\n";
    for (const auto& r : trace.rows) {
        out << r.iter;
        for (const double v : r.theta) {
            out << ',' << format_double(v);
        }
        out << ',' << to_char(r.outcome) << ',' << r.leaf_outputs << ',' << r.leaf_loops << ',' << r.merge_loops
            << ',' << r.time_ns << '\n';
    }
}

/*!
 * One summary line. Rows with iter < burn_in are ignored; the mixing
 * statistics use the last parameter column and the overhead statistics
 * assume one root flip per row.
 */
struct SummaryRow {
    std::size_t n = 0;
    int ell = 0;
    double omega_hat = 0.0;
    double phi_hat = 0.0;
    double acf1 = std::nan("");
    double acf4 = std::nan("");
    double acf16 = std::nan("");
    double ess = std::nan("");
    double mean_time_ns = 0.0;
};

inline SummaryRow summarize(const ChainTrace& trace, std::size_t n, int ell, std::size_t burn_in) {
    SummaryRow s;
    s.n = n;
    s.ell = ell;
    double outputs = 0.0;
    double loops = 0.0;
    double time = 0.0;
    std::size_t count = 0;
    for (const auto& r : trace.rows) {
        if (r.iter >= burn_in) {
            outputs += static_cast<double>(r.leaf_outputs);
            loops += static_cast<double>(r.leaf_loops);
            time += static_cast<double>(r.time_ns);
            ++count;
        }
    }
    if (count == 0) {
        throw std::invalid_argument("summarize: no rows after burn-in");
    }
    s.omega_hat = outputs / static_cast<double>(count);
    s.phi_hat = loops / static_cast<double>(count);
    s.mean_time_ns = time / static_cast<double>(count);
    const auto col = trace.column(trace.num_params - 1, burn_in);
    const double m = detail::mean_of(col);
    if (detail::autocovariance(col, m, 0) > 0.0) {
        for (const auto& [lag, slot] : {std::pair{1u, &s.acf1}, std::pair{4u, &s.acf4}, std::pair{16u, &s.acf16}}) {
            if (col.size() >= 10 * lag) {
                *slot = acf(col, lag);
            }
        }
        s.ess = dcbf::ess(col);
    }
    return s;
}

inline void write_summary_header(std::ostream& out) {
    out << "n,ell,omega_hat,phi_hat,acf1,acf4,acf16,ess,mean_time_ns\n";
}

inline void write_summary_row(std::ostream& out, const SummaryRow& s) {
    out << s.n << ',' << s.ell << ',' << format_double(s.omega_hat) << ',' << format_double(s.phi_hat) << ','
        << format_double(s.acf1) << ',' << format_double(s.acf4) << ',' << format_double(s.acf16) << ','
        << format_double(s.ess) << ',' << format_double(s.mean_time_ns) << '\n';
}

//---------------------------------------------------------------------------//
// Vanilla 2-coin benchmark
//---------------------------------------------------------------------------//

/*!
 * Mean loop count of the monolithic 2-coin over n tractable factors, each
 * side with c = 1 and p = p_per_factor^n (the conjunction of n coins).
 */
inline double vanilla_two_coin_benchmark(std::size_t n, double p_per_factor, std::size_t flips, RandomStream& stream,
                                         CostLedger* cost = nullptr) {
    if (flips == 0) {
        throw std::invalid_argument("vanilla_two_coin_benchmark: need at least one flip");
    }
    std::vector<FactorPair> factors;
    factors.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        factors.push_back({WeightedCoin::known(1.0, p_per_factor), WeightedCoin::known(1.0, p_per_factor)});
    }
    const FactorPair pair = FactorPair::product(factors);
    CostLedger ledger;
    for (std::size_t k = 0; k < flips; ++k) {
        flip_two_coin(pair, 1.0, stream, ledger);
    }
    if (cost != nullptr) {
        cost->merge(ledger);
    }
    return static_cast<double>(ledger.leaf_loops) / static_cast<double>(flips);
}

//! Least-squares slope of y on x.
inline double fit_slope(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw std::invalid_argument("fit_slope: need two or more paired points");
    }
    const double mx = detail::mean_of(x);
    const double my = detail::mean_of(y);
    double sxy = 0.0;
    double sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    return sxy / sxx;
}

}  // namespace dcbf
