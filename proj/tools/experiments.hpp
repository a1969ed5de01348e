// SPDX-License-Identifier: Apache-2.0
// Experiment drivers behind dcbf_bench. Each experiment writes CSV files into
// spec.out and returns a process exit code.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcbf/cox.hpp"
#include "dcbf/diffusion.hpp"
#include "dcbf/factories.hpp"
#include "dcbf/mcmc.hpp"
#include "dcbf/partition.hpp"

namespace dcbf::bench {

struct ExperimentSpec {
    std::string name;
    std::optional<std::size_t> n;
    std::optional<int> ell;
    std::optional<double> delta;
    std::optional<double> portkey;  //!< leaf escape probability per loop
    std::optional<std::size_t> iters;
    std::uint64_t seed = 1;
    std::string out = "results";
    bool parallel = false;
    bool timing = false;
    bool batched = false;
    std::string sampler = "both";  //!< cox: cgs, ags or both
    std::optional<std::string> data;
    std::size_t burn_in = 0;
    std::optional<std::size_t> adapt;
};

inline const std::vector<std::string>& experiment_names() {
    static const std::vector<std::string> names{"factory-check",  "overhead-balanced", "overhead-scaling",
                                                "vanilla-blowup", "diffusion",         "cox"};
    return names;
}

inline std::string usage_text() {
    std::string s = "usage: dcbf_bench <experiment> [options]\nexperiments:";
    for (const auto& n : experiment_names()) s += " " + n;
    return s + "\nrun 'dcbf_bench --help' for the option list\n";
}

//! Factory-check grid of (c1, p1, c2, p2).
inline const std::vector<std::array<double, 4>>& factory_grid() {
    static const std::vector<std::array<double, 4>> grid{
        {1.0, 0.5, 1.0, 0.5},  {2.0, 0.3, 1.0, 0.9},  {0.5, 0.9, 3.0, 0.2},
        {1.0, 0.1, 1.0, 0.9},  {4.0, 0.25, 1.0, 1.0}, {1.0, 1.0, 1.0, 0.05},
        {0.2, 0.7, 0.3, 0.4},  {10.0, 0.05, 1.0, 0.6}, {1.5, 0.6, 2.5, 0.35}};
    return grid;
}

/*!
 * Asymmetric tractable factors for the randomized-overhead experiment:
 * factor i has h(current) = 0.5 + 0.2 v_i and h(proposed) = 0.5 - 0.2 v_i,
 * v_i = 1 - 2 (i + 1/2) / n.
 */
inline std::pair<std::vector<double>, std::vector<double>> scaling_factors(std::size_t n) {
    std::vector<double> cur(n), prop(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double v = 1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(n);
        cur[i] = 0.5 + 0.2 * v;
        prop[i] = 0.5 - 0.2 * v;
    }
    return {cur, prop};
}

namespace detail {

inline std::ofstream open_out(const ExperimentSpec& spec, const std::string& file) {
    std::filesystem::create_directories(spec.out);
    std::ofstream f(std::filesystem::path(spec.out) / file);
    if (!f) throw std::runtime_error("cannot write " + (std::filesystem::path(spec.out) / file).string());
    return f;
}

inline SummaryRow cost_only_row(std::size_t n, int ell, double omega, double phi) {
    SummaryRow r;
    r.n = n;
    r.ell = ell;
    r.omega_hat = omega;
    r.phi_hat = phi;
    return r;
}

inline void write_summary(const ExperimentSpec& spec, const std::string& file, const std::vector<SummaryRow>& rows) {
    auto f = open_out(spec, file);
    write_summary_header(f);
    for (const auto& r : rows) write_summary_row(f, r);
}

struct MeanVar {
    double sum = 0.0;
    double sum_sq = 0.0;
    std::size_t count = 0;
    void add(double v) {
        sum += v;
        sum_sq += v * v;
        ++count;
    }
    double mean() const { return sum / static_cast<double>(count); }
    double se() const {
        const double m = mean();
        return std::sqrt(std::max(0.0, sum_sq / static_cast<double>(count) - m * m) / static_cast<double>(count));
    }
};

inline void write_trace(const ExperimentSpec& spec, const std::string& file, const ChainTrace& trace) {
    auto f = open_out(spec, file);
    write_trace_csv(f, trace);
}

}  // namespace detail

//---------------------------------------------------------------------------//
// Experiments
//---------------------------------------------------------------------------//

inline void run_factory_check(const ExperimentSpec& spec, std::ostream& log) {
    const std::size_t flips = spec.iters.value_or(100000);
    RandomStream root(spec.seed);
    auto f = detail::open_out(spec, "factory_check.csv");
    f << "c1,p1,c2,p2,flips,heads_rate,heads_expected,heads_z,mean_loops,loops_expected,loops_z\n";
    std::vector<SummaryRow> rows;
    for (std::size_t g = 0; g < factory_grid().size(); ++g) {
        const auto [c1, p1, c2, p2] = factory_grid()[g];
        RandomStream s = root.split(g);
        const FactorPair pair{WeightedCoin::known(c1, p1), WeightedCoin::known(c2, p2)};
        CostLedger ledger;
        std::size_t heads = 0;
        for (std::size_t k = 0; k < flips; ++k) {
            heads += flip_two_coin(pair, 1.0, s, ledger) == FlipOutcome::Heads;
        }
        const double nf = static_cast<double>(flips);
        const double h = c1 * p1 / (c1 * p1 + c2 * p2);
        const double stop = (c1 * p1 + c2 * p2) / (c1 + c2);
        const double enl = 1.0 / stop;
        const double rate = static_cast<double>(heads) / nf;
        const double loops = static_cast<double>(ledger.leaf_loops) / nf;
        const double hz = (rate - h) / std::sqrt(h * (1 - h) / nf);
        const double lz = stop < 1.0 ? (loops - enl) / std::sqrt((1 - stop) / (stop * stop) / nf) : 0.0;
        f << format_double(c1) << ',' << format_double(p1) << ',' << format_double(c2) << ',' << format_double(p2)
          << ',' << flips << ',' << format_double(rate) << ',' << format_double(h) << ',' << format_double(hz) << ','
          << format_double(loops) << ',' << format_double(enl) << ',' << format_double(lz) << '\n';
        log << "factory-check (" << c1 << ',' << p1 << ',' << c2 << ',' << p2 << "): heads z=" << hz
            << " loops z=" << lz << '\n';
        rows.push_back(detail::cost_only_row(1, 0, 1.0, loops));
    }
    detail::write_summary(spec, "summary.csv", rows);
}

inline void run_overhead_balanced(const ExperimentSpec& spec, std::ostream& log) {
    const std::size_t flips = spec.iters.value_or(100000);
    std::vector<int> ells = spec.ell ? std::vector<int>{*spec.ell} : std::vector<int>{1, 2, 3};
    RandomStream root(spec.seed);
    const PortkeyConfig portkey = spec.portkey ? PortkeyConfig::leaf_escape(*spec.portkey) : PortkeyConfig{};
    auto f = detail::open_out(spec, "overhead_balanced.csv");
    f << "ell,leaves,root_flips,omega_hat,omega_se,phi_hat,predicted\n";
    std::vector<SummaryRow> rows;
    for (const int ell : ells) {
        RandomStream s = root.split(static_cast<std::uint64_t>(ell));
        const std::size_t leaves = std::size_t{1} << ell;
        // theta = vartheta: both sides of every leaf are the same coin.
        const std::vector<FactorPair> pairs(leaves, {WeightedCoin::known(1.0, 0.5), WeightedCoin::known(1.0, 0.5)});
        CostLedger ledger;
        detail::MeanVar outputs;
        for (std::size_t k = 0; k < flips; ++k) {
            const std::uint64_t before = ledger.leaf_outputs;
            flip_dcbf(ell, pairs, portkey, s, ledger);
            outputs.add(static_cast<double>(ledger.leaf_outputs - before));
        }
        const Overhead o = measure_overhead(ledger);
        f << ell << ',' << leaves << ',' << flips << ',' << format_double(o.omega) << ','
          << format_double(outputs.se()) << ',' << format_double(o.phi) << ','
          << format_double(predicted_overhead_balanced(ell)) << '\n';
        log << "overhead-balanced ell=" << ell << ": omega=" << o.omega << " (4^ell=" << predicted_overhead_balanced(ell)
            << ", se " << outputs.se() << ")\n";
        rows.push_back(detail::cost_only_row(leaves, ell, o.omega, o.phi));
    }
    detail::write_summary(spec, "summary.csv", rows);
}

inline void run_overhead_scaling(const ExperimentSpec& spec, std::ostream& log) {
    const std::size_t flips = spec.iters.value_or(100000);
    std::vector<std::size_t> ns = spec.n ? std::vector<std::size_t>{*spec.n} : std::vector<std::size_t>{4, 16, 64};
    RandomStream root(spec.seed);
    const PortkeyConfig portkey = spec.portkey ? PortkeyConfig::leaf_escape(*spec.portkey) : PortkeyConfig{};
    auto f = detail::open_out(spec, "overhead_scaling.csv");
    f << "n,ell,root_flips,omega_hat,omega_se,phi_hat,predicted\n";
    std::vector<SummaryRow> rows;
    for (std::size_t idx = 0; idx < ns.size(); ++idx) {
        const std::size_t n = ns[idx];
        const int ell = spec.ell.value_or(default_depth(n));
        const auto [cur, prop] = scaling_factors(n);
        std::vector<FactorPair> factors;
        for (std::size_t i = 0; i < n; ++i) {
            factors.push_back({WeightedCoin::known(0.7, prop[i] / 0.7), WeightedCoin::known(0.7, cur[i] / 0.7)});
        }
        const PartitionTree base = build_tree(n, ell);
        RandomStream s = root.split(2 * idx);
        RandomStream shuffle = root.split(2 * idx + 1);
        CostLedger ledger;
        detail::MeanVar outputs;
        for (std::size_t k = 0; k < flips; ++k) {
            const std::uint64_t before = ledger.leaf_outputs;
            flip_dcbf(shuffle_assignment(base, shuffle), factors, portkey, s, ledger);
            outputs.add(static_cast<double>(ledger.leaf_outputs - before));
        }
        const Overhead o = measure_overhead(ledger);
        const double predicted = n % (std::size_t{1} << ell) == 0 ? predicted_overhead_randomized(cur, prop, ell, 0)
                                                                 : std::nan("");
        f << n << ',' << ell << ',' << flips << ',' << format_double(o.omega) << ',' << format_double(outputs.se())
          << ',' << format_double(o.phi) << ',' << format_double(predicted) << '\n';
        log << "overhead-scaling n=" << n << " ell=" << ell << ": omega=" << o.omega << " predicted=" << predicted
            << '\n';
        rows.push_back(detail::cost_only_row(n, ell, o.omega, o.phi));
    }
    detail::write_summary(spec, "summary.csv", rows);
}

inline void run_vanilla_blowup(const ExperimentSpec& spec, std::ostream& log) {
    const std::size_t flips = spec.iters.value_or(20000);
    const std::size_t n_max = spec.n.value_or(30);
    const double p = 0.9;
    RandomStream root(spec.seed);
    auto f = detail::open_out(spec, "vanilla_blowup.csv");
    f << "n,flips,enl,enl_expected\n";
    std::vector<double> xs, ys;
    std::vector<SummaryRow> rows;
    for (std::size_t n = 5; n <= n_max; n += 5) {
        RandomStream s = root.split(n);
        const double enl = vanilla_two_coin_benchmark(n, p, flips, s);
        f << n << ',' << flips << ',' << format_double(enl) << ',' << format_double(std::pow(p, -double(n))) << '\n';
        xs.push_back(static_cast<double>(n));
        ys.push_back(std::log(enl));
        rows.push_back(detail::cost_only_row(n, 0, 1.0, enl));
    }
    if (xs.size() >= 2) {
        const double slope = fit_slope(xs, ys);
        auto fit = detail::open_out(spec, "vanilla_fit.csv");
        fit << "slope,expected_slope,relative_error\n"
            << format_double(slope) << ',' << format_double(-std::log(p)) << ','
            << format_double(std::abs(slope + std::log(p)) / -std::log(p)) << '\n';
        log << "vanilla-blowup: log-ENL slope " << slope << " (expected " << -std::log(p) << ")\n";
    }
    detail::write_summary(spec, "summary.csv", rows);
}

inline void run_diffusion(const ExperimentSpec& spec, std::ostream& log) {
    DiffusionDataset data;
    if (spec.data) {
        std::ifstream in(*spec.data);
        if (!in) throw std::invalid_argument("cannot read " + *spec.data);
        data = read_diffusion_csv(in);
    } else {
        const std::size_t n = spec.n.value_or(16);
        RandomStream s = RandomStream(spec.seed).split(7);
        data = simulate_tanh_path(0.0, regular_times(n, 0.25), 0.0, s);
    }
    {
        auto f = detail::open_out(spec, "data.csv");
        write_diffusion_csv(f, data);
    }
    const std::size_t n = data.intervals();
    DiffusionConfig config;
    config.delta = spec.delta.value_or(8.0);
    config.leaf_escape = spec.portkey;
    config.depth = spec.ell;
    config.batched = spec.batched;
    config.parallel = spec.parallel;
    config.dcbf.parallel = spec.parallel;
    ChainConfig chain;
    chain.iterations = spec.iters.value_or(10000);
    chain.burn_in = spec.burn_in;
    chain.seed = spec.seed;
    const ChainTrace trace = run_diffusion_chain(data, config, chain, 0.0, spec.timing);
    detail::write_trace(spec, "trace.csv", trace);
    const SummaryRow row = summarize(trace, n, config.resolved_depth(n), chain.burn_in);
    detail::write_summary(spec, "summary.csv", {row});
    log << "diffusion n=" << n << ": acceptance " << trace.acceptance_rate(chain.burn_in) << ", omega "
        << row.omega_hat << ", acf1 " << row.acf1 << ", ess " << row.ess << '\n';
}

inline void run_cox(const ExperimentSpec& spec, std::ostream& log) {
    LevelSetModel model;
    CoxDataset data;
    LatentField start;
    if (spec.data) {
        std::ifstream pts(*spec.data);
        std::ifstream geo(*spec.data + ".meta");
        if (!pts || !geo) throw std::invalid_argument("cannot read " + *spec.data + " and its .meta sidecar");
        data = read_cox_dataset(pts, geo);
        // Start from the occupied cells: high level where a point fell, low elsewhere.
        const CoxGrid grid(data, model.cells_per_unit);
        start.cells_per_side = grid.cells_per_side();
        for (std::size_t c = 0; c < grid.cells(); ++c) {
            start.values.push_back(model.representative(grid.point_counts()[c] > 0 ? 1 : 0));
        }
    } else {
        const std::size_t n = spec.n.value_or(256);
        const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
        if (side * side != n) throw std::invalid_argument("cox: n must be a perfect square");
        RandomStream s = RandomStream(spec.seed).split(7);
        SimulatedCox sim = simulate_lscp(model, static_cast<double>(side), {1.0 / 3, 5.0 / 3}, s);
        data = std::move(sim.data);
        start = std::move(sim.truth);
    }
    {
        auto f = detail::open_out(spec, "points.csv");
        write_cox_points_csv(f, data);
        auto g = detail::open_out(spec, "points.csv.meta");
        write_cox_geometry(g, data);
        auto h = detail::open_out(spec, "latent_start.csv");
        write_latent_csv(h, start);
    }
    const auto n = static_cast<std::size_t>(data.area());
    CoxConfig config;
    if (spec.delta) config.delta = {*spec.delta / 2, *spec.delta};
    config.depth = spec.ell;
    config.leaf_escape = spec.portkey;
    config.parallel = spec.parallel;
    if (spec.adapt) config.adapt_iters = *spec.adapt;
    ChainConfig chain;
    chain.iterations = spec.iters.value_or(10000);
    chain.burn_in = spec.burn_in;
    chain.seed = spec.seed;
    std::vector<std::pair<std::string, CoxSampler>> samplers;
    if (spec.sampler == "cgs" || spec.sampler == "both") samplers.emplace_back("cgs", CoxSampler::Collapsed);
    if (spec.sampler == "ags" || spec.sampler == "both") samplers.emplace_back("ags", CoxSampler::Augmented);
    if (samplers.empty()) throw std::invalid_argument("cox: --sampler must be cgs, ags or both");
    const int ell = config.depth.value_or(default_depth(n));
    for (const auto& [label, sampler] : samplers) {
        const CoxRun run =
            run_cox_chain(model, data, config, sampler, chain, initial_cox_state(start, {0.5, 1.5}), spec.timing);
        detail::write_trace(spec, "trace_" + label + ".csv", run.trace);
        const SummaryRow row = summarize(run.trace, n, ell, chain.burn_in);
        detail::write_summary(spec, "summary_" + label + ".csv", {row});
        log << "cox " << label << " n=" << n << ": acceptance(theta_2) " << run.trace.acceptance_rate(chain.burn_in)
            << ", acf1 " << row.acf1 << ", omega " << row.omega_hat << '\n';
    }
}

//! Runs body, mapping sampler aborts to exit code 3 and invalid input to 2.
inline int run_guarded(const std::function<void()>& body, std::ostream& err) {
    try {
        body();
    } catch (const BoundViolation& e) {
        err << "abort: bound violation: " << e.what() << '\n';
        return 3;
    } catch (const LoopCapExceeded& e) {
        err << "abort: loop cap exceeded: " << e.what() << '\n';
        return 3;
    } catch (const RejectionCapExceeded& e) {
        err << "abort: rejection cap exceeded: " << e.what() << '\n';
        return 3;
    } catch (const std::invalid_argument& e) {
        err << "invalid input: " << e.what() << '\n';
        return 2;
    } catch (const std::domain_error& e) {
        err << "invalid input: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

/*!
 * Runs one experiment. Exit codes: 0 success, 2 unknown experiment or invalid
 * input, 3 bound violation or loop/rejection cap abort.
 */
inline int run_experiment(const ExperimentSpec& spec, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
    static const std::map<std::string, std::function<void(const ExperimentSpec&, std::ostream&)>> table{
        {"factory-check", run_factory_check}, {"overhead-balanced", run_overhead_balanced},
        {"overhead-scaling", run_overhead_scaling}, {"vanilla-blowup", run_vanilla_blowup},
        {"diffusion", run_diffusion}, {"cox", run_cox}};
    const auto it = table.find(spec.name);
    if (it == table.end()) {
        err << "unknown experiment '" << spec.name << "'\n" << usage_text();
        return 2;
    }
    return run_guarded([&] { it->second(spec, log); }, err);
}

}  // namespace dcbf::bench
