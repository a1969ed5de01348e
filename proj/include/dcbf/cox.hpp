// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <future>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
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
 * Level-set Cox process on the square [0, side]^2.
 *
 * The latent field z is piecewise constant on a lattice of square cells with
 * cells_per_unit cells along each unit of length, and has a 4-neighbour GMRF
 * prior with precision tau K^order, K = kappa I + D - W (D the degrees, W the
 * adjacency). Order 2 gives the smoother Matern-like field. The intensity on
 * {thresholds[l] <= z < thresholds[l+1]} is theta[l].
 */
struct LevelSetModel {
    std::vector<double> thresholds{-std::numeric_limits<double>::infinity(), 0.0,
                                   std::numeric_limits<double>::infinity()};
    std::vector<std::pair<double, double>> prior_ranges{{0.05, 1.0}, {1.0, 3.0}};
    double gmrf_tau = 4.0;
    double gmrf_kappa = 0.02;
    int gmrf_order = 2;
    int cells_per_unit = 2;

    std::size_t levels() const { return thresholds.size() - 1; }

    std::size_t level_of(double z) const {
        for (std::size_t l = 0; l + 1 < levels(); ++l) {
            if (z < thresholds[l + 1]) return l;
        }
        return levels() - 1;
    }

    bool in_support(std::size_t level, double theta) const {
        return theta > prior_ranges[level].first && theta < prior_ranges[level].second;
    }

    //! A field value inside level l, used for the data-generating field.
    double representative(std::size_t level) const {
        const double lo = thresholds[level];
        const double hi = thresholds[level + 1];
        if (std::isinf(lo) && std::isinf(hi)) return 0.0;
        if (std::isinf(lo)) return hi - 1.0;
        if (std::isinf(hi)) return lo + 1.0;
        return 0.5 * (lo + hi);
    }

    void validate() const {
        if (thresholds.size() < 2 || prior_ranges.size() != levels()) {
            throw std::invalid_argument("LevelSetModel: need L + 1 thresholds and L prior ranges");
        }
        for (std::size_t l = 0; l + 1 < thresholds.size(); ++l) {
            if (!(thresholds[l] < thresholds[l + 1])) {
                throw std::invalid_argument("LevelSetModel: thresholds must increase");
            }
        }
        for (const auto& [lo, hi] : prior_ranges) {
            if (!(lo > 0.0 && lo < hi && std::isfinite(hi))) {
                throw std::invalid_argument("LevelSetModel: prior ranges must be bounded positive intervals");
            }
        }
        if (!(gmrf_tau > 0.0 && gmrf_kappa > 0.0)) {
            throw std::invalid_argument("LevelSetModel: GMRF tau and kappa must be positive");
        }
        if (gmrf_order != 1 && gmrf_order != 2) {
            throw std::invalid_argument("LevelSetModel: GMRF order must be 1 or 2");
        }
        if (cells_per_unit < 1 || cells_per_unit > 8) {
            throw std::invalid_argument("LevelSetModel: cells_per_unit must lie in [1, 8]");
        }
    }
};

struct CoxDataset {
    double side = 0.0;
    std::vector<std::array<double, 2>> points;

    double area() const { return side * side; }

    void validate() const {
        if (!(side > 0.0) || side != std::floor(side)) {
            throw std::invalid_argument("CoxDataset: side must be a positive integer");
        }
        for (const auto& p : points) {
            if (!(p[0] >= 0.0 && p[0] <= side && p[1] >= 0.0 && p[1] <= side)) {
                throw std::invalid_argument("CoxDataset: point outside S");
            }
        }
    }
};

//! Row-major values of z on the cell lattice (row = y index).
struct LatentField {
    std::size_t cells_per_side = 0;
    std::vector<double> values;
};

//---------------------------------------------------------------------------//
// File formats
//---------------------------------------------------------------------------//

inline void write_cox_points_csv(std::ostream& out, const CoxDataset& data) {
    out << "sx,sy\n";
    for (const auto& p : data.points) {
        out << format_double(p[0]) << ',' << format_double(p[1]) << '\n';
    }
}

//! Sidecar with one `key=value` per line; only `side` is read.
inline void write_cox_geometry(std::ostream& out, const CoxDataset& data) {
    out << "side=" << format_double(data.side) << '\n';
}

inline double read_cox_geometry(std::istream& in) {
    std::string line;
    std::optional<double> side;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("geometry line " + std::to_string(lineno) + ": expected key=value");
        }
        if (line.substr(0, eq) == "side") {
            side = detail::parse_double(line.substr(eq + 1), lineno);
        }
    }
    if (!side) throw std::invalid_argument("geometry: missing 'side'");
    return *side;
}

inline CoxDataset read_cox_dataset(std::istream& points, std::istream& geometry) {
    CoxDataset data;
    data.side = read_cox_geometry(geometry);
    for (const auto& row : detail::read_numeric_csv(points, {"sx", "sy"})) {
        data.points.push_back({row[0], row[1]});
    }
    data.validate();
    return data;
}

inline void write_latent_csv(std::ostream& out, const LatentField& field) {
    for (std::size_t r = 0; r < field.cells_per_side; ++r) {
        for (std::size_t c = 0; c < field.cells_per_side; ++c) {
            if (c > 0) out << ',';
            out << format_double(field.values[r * field.cells_per_side + c]);
        }
        out << '\n';
    }
}

inline LatentField read_latent_csv(std::istream& in) {
    LatentField field;
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        if (line.empty() || line == "\r") continue;
        const auto cells = detail::split_csv(line);
        if (field.cells_per_side == 0) field.cells_per_side = cells.size();
        if (cells.size() != field.cells_per_side) {
            throw std::invalid_argument("latent CSV line " + std::to_string(lineno) + ": ragged row");
        }
        for (const auto& c : cells) field.values.push_back(detail::parse_double(c, lineno));
    }
    if (field.values.size() != field.cells_per_side * field.cells_per_side) {
        throw std::invalid_argument("latent CSV: grid is not square");
    }
    return field;
}

//---------------------------------------------------------------------------//
// Lattice bookkeeping
//---------------------------------------------------------------------------//

/*!
 * Cells and unit tiles of S. Tile t covers cells_per_unit^2 cells; within a
 * tile, cell k sits at local row k / cells_per_unit and column
 * k % cells_per_unit.
 */
class CoxGrid {
  public:
    CoxGrid(const CoxDataset& data, int cells_per_unit) : unit_(static_cast<std::size_t>(cells_per_unit)) {
        data.validate();
        tiles_per_side_ = static_cast<std::size_t>(data.side);
        cells_per_side_ = tiles_per_side_ * unit_;
        cell_area_ = 1.0 / static_cast<double>(unit_ * unit_);
        point_counts_.assign(cells(), 0);
        for (const auto& p : data.points) {
            ++point_counts_[cell_at(p[0], p[1])];
        }
    }

    std::size_t tiles() const { return tiles_per_side_ * tiles_per_side_; }
    std::size_t cells() const { return cells_per_side_ * cells_per_side_; }
    std::size_t cells_per_side() const { return cells_per_side_; }
    std::size_t cells_per_tile() const { return unit_ * unit_; }
    double cell_area() const { return cell_area_; }
    double area() const { return static_cast<double>(tiles()); }
    const std::vector<std::uint32_t>& point_counts() const { return point_counts_; }

    //! Half-open cells [c h, (c+1) h); the far edges belong to the last cell.
    std::size_t cell_at(double x, double y) const {
        auto idx = [&](double v) {
            const auto i = static_cast<std::size_t>(std::floor(v * static_cast<double>(unit_)));
            return std::min(i, cells_per_side_ - 1);
        };
        return idx(y) * cells_per_side_ + idx(x);
    }

    std::size_t tile_cell(std::size_t tile, std::size_t k) const {
        const std::size_t tr = tile / tiles_per_side_;
        const std::size_t tc = tile % tiles_per_side_;
        return (tr * unit_ + k / unit_) * cells_per_side_ + tc * unit_ + k % unit_;
    }

    //! Local index of the cell containing the tile centroid.
    std::size_t centroid_local() const { return (unit_ / 2) * unit_ + unit_ / 2; }

    std::array<double, 2> cell_center(std::size_t cell) const {
        const double h = 1.0 / static_cast<double>(unit_);
        return {(static_cast<double>(cell % cells_per_side_) + 0.5) * h,
                (static_cast<double>(cell / cells_per_side_) + 0.5) * h};
    }

    template <class F>
    void for_each_neighbour(std::size_t cell, F&& f) const {
        const std::size_t r = cell / cells_per_side_;
        const std::size_t c = cell % cells_per_side_;
        if (c > 0) f(cell - 1);
        if (c + 1 < cells_per_side_) f(cell + 1);
        if (r > 0) f(cell - cells_per_side_);
        if (r + 1 < cells_per_side_) f(cell + cells_per_side_);
    }

  private:
    std::size_t unit_;
    std::size_t tiles_per_side_ = 0;
    std::size_t cells_per_side_ = 0;
    double cell_area_ = 1.0;
    std::vector<std::uint32_t> point_counts_;
};

//---------------------------------------------------------------------------//
// Data generation
//---------------------------------------------------------------------------//

struct SimulatedCox {
    CoxDataset data;
    LatentField truth;
};

/*!
 * Data on [0, side]^2 split into L vertical strips of equal width, strip l
 * (from the left) carrying intensity theta[l]. The returned field takes the
 * value model.representative(l) on cells whose centre lies in strip l.
 */
inline SimulatedCox simulate_lscp(const LevelSetModel& model, double side, const std::vector<double>& theta,
                                  RandomStream& stream) {
    model.validate();
    if (theta.size() != model.levels()) {
        throw std::invalid_argument("simulate_lscp: one intensity per level required");
    }
    SimulatedCox out;
    out.data.side = side;
    const double width = side / static_cast<double>(theta.size());
    for (std::size_t l = 0; l < theta.size(); ++l) {
        if (!(theta[l] >= 0.0)) throw std::invalid_argument("simulate_lscp: negative intensity");
        std::poisson_distribution<std::uint64_t> count(theta[l] * width * side);
        const std::uint64_t m = count(stream);
        for (std::uint64_t k = 0; k < m; ++k) {
            out.data.points.push_back({(static_cast<double>(l) + stream.uniform()) * width, stream.uniform() * side});
        }
    }
    out.data.validate();
    const CoxGrid grid(out.data, model.cells_per_unit);
    out.truth.cells_per_side = grid.cells_per_side();
    out.truth.values.resize(grid.cells());
    for (std::size_t c = 0; c < grid.cells(); ++c) {
        const auto l = std::min(static_cast<std::size_t>(grid.cell_center(c)[0] / width), theta.size() - 1);
        out.truth.values[c] = model.representative(l);
    }
    return out;
}

//---------------------------------------------------------------------------//
// Augmented estimator
//---------------------------------------------------------------------------//

/*!
 * Unbiased estimator of exp(-sum_l theta_l mu(S_l)) from psi_counts[l] =
 * |psi cap S_l|, when psi is a Poisson process of rate nu max(theta) -
 * min(theta) on S.
 */
inline double log_ags_estimator(const std::vector<double>& theta, const std::vector<std::uint64_t>& psi_counts,
                                double area, double nu) {
    const double hi = *std::max_element(theta.begin(), theta.end());
    const double lo = *std::min_element(theta.begin(), theta.end());
    if (!(nu * hi > lo)) throw std::domain_error("ags_estimator: need nu * max(theta) > min(theta)");
    double log_est = -area * lo;
    for (std::size_t l = 0; l < theta.size(); ++l) {
        if (psi_counts[l] > 0) {
            log_est += static_cast<double>(psi_counts[l]) * std::log((nu * hi - theta[l]) / (nu * hi - lo));
        }
    }
    return log_est;
}

inline double ags_estimator(const std::vector<double>& theta, const std::vector<std::uint64_t>& psi_counts,
                            double area, double nu) {
    return std::exp(log_ags_estimator(theta, psi_counts, area, nu));
}

inline double ags_psi_rate(const std::vector<double>& theta, double nu) {
    return nu * *std::max_element(theta.begin(), theta.end()) - *std::min_element(theta.begin(), theta.end());
}

/*!
 * Log of the augmented target in theta given level counts: prior (uniform),
 * point term, estimator, and the density of psi under its theta-dependent
 * Poisson law relative to a unit-rate process. -inf outside the prior.
 */
inline double ags_log_target(const LevelSetModel& model, const std::vector<double>& theta,
                             const std::vector<std::uint64_t>& point_counts,
                             const std::vector<std::uint64_t>& psi_counts, double area, double nu) {
    for (std::size_t l = 0; l < theta.size(); ++l) {
        if (!model.in_support(l, theta[l])) return -std::numeric_limits<double>::infinity();
    }
    const double rate = ags_psi_rate(theta, nu);
    std::uint64_t psi_total = 0;
    double lp = log_ags_estimator(theta, psi_counts, area, nu) - rate * area;
    for (std::size_t l = 0; l < theta.size(); ++l) {
        lp += static_cast<double>(point_counts[l]) * std::log(theta[l]);
        psi_total += psi_counts[l];
    }
    return lp + static_cast<double>(psi_total) * std::log(rate);
}

//---------------------------------------------------------------------------//
// Sampler state and blocks
//---------------------------------------------------------------------------//

struct CoxState {
    std::vector<double> theta;
    std::vector<double> z;            //!< per cell
    std::vector<std::uint32_t> psi;   //!< per-cell counts of the auxiliary process
};

struct LevelSummary {
    std::vector<std::size_t> cell_level;
    std::vector<std::uint64_t> points;  //!< |y cap S_l|
    std::vector<std::uint64_t> psi;     //!< |psi cap S_l|
    std::vector<double> area;           //!< mu(S_l)
};

inline LevelSummary summarize_levels(const LevelSetModel& model, const CoxGrid& grid, const CoxState& state) {
    LevelSummary s;
    s.cell_level.resize(grid.cells());
    s.points.assign(model.levels(), 0);
    s.psi.assign(model.levels(), 0);
    s.area.assign(model.levels(), 0.0);
    for (std::size_t c = 0; c < grid.cells(); ++c) {
        const std::size_t l = model.level_of(state.z[c]);
        s.cell_level[c] = l;
        s.points[l] += grid.point_counts()[c];
        s.psi[l] += state.psi.empty() ? 0 : state.psi[c];
        s.area[l] += grid.cell_area();
    }
    return s;
}

//! K z with K = kappa I + D - W on the cell lattice.
inline std::vector<double> apply_gmrf_operator(const LevelSetModel& model, const CoxGrid& grid,
                                               const std::vector<double>& z) {
    std::vector<double> w(grid.cells());
    for (std::size_t c = 0; c < grid.cells(); ++c) {
        double v = model.gmrf_kappa * z[c];
        grid.for_each_neighbour(c, [&](std::size_t j) { v += z[c] - z[j]; });
        w[c] = v;
    }
    return w;
}

//! Unnormalized log prior density of z: -tau/2 z' K z (order 1) or -tau/2 |K z|^2 (order 2).
inline double gmrf_log_density(const LevelSetModel& model, const CoxGrid& grid, const std::vector<double>& z) {
    const auto w = apply_gmrf_operator(model, grid, z);
    double e = 0.0;
    for (std::size_t c = 0; c < grid.cells(); ++c) {
        e += model.gmrf_order == 1 ? z[c] * w[c] : w[c] * w[c];
    }
    return -0.5 * model.gmrf_tau * e;
}

/*!
 * One sitewise random-walk sweep over z in cell order. Each cell's level l
 * contributes y_count * log_point_weight[l] + psi_count * log_psi_weight[l]
 * to the log likelihood. Returns the number of accepted moves.
 */
inline std::size_t update_latent(const LevelSetModel& model, const CoxGrid& grid, CoxState& state,
                                 const std::vector<double>& log_point_weight, const std::vector<double>& log_psi_weight,
                                 double step, RandomStream& stream) {
    std::normal_distribution<double> normal;
    std::size_t accepted = 0;
    auto loglik = [&](std::size_t c, std::size_t l) {
        double v = 0.0;
        if (grid.point_counts()[c] > 0) v += grid.point_counts()[c] * log_point_weight[l];
        if (!state.psi.empty() && state.psi[c] > 0) v += state.psi[c] * log_psi_weight[l];
        return v;
    };
    // w = K z is kept current; moving z_c by d changes w_c by (kappa + deg) d
    // and each neighbour's w by -d.
    std::vector<double> w = apply_gmrf_operator(model, grid, state.z);
    std::array<std::size_t, 4> nb{};
    for (std::size_t c = 0; c < grid.cells(); ++c) {
        std::size_t deg = 0;
        grid.for_each_neighbour(c, [&](std::size_t j) { nb[deg++] = j; });
        const double diag = model.gmrf_kappa + static_cast<double>(deg);
        const double z0 = state.z[c];
        const double d = step * normal(stream);
        double delta_energy = 0.0;
        if (model.gmrf_order == 1) {
            delta_energy = 2.0 * d * w[c] + diag * d * d;
        } else {
            delta_energy = (w[c] + diag * d) * (w[c] + diag * d) - w[c] * w[c];
            for (std::size_t k = 0; k < deg; ++k) {
                delta_energy += (w[nb[k]] - d) * (w[nb[k]] - d) - w[nb[k]] * w[nb[k]];
            }
        }
        const double log_ratio = -0.5 * model.gmrf_tau * delta_energy + loglik(c, model.level_of(z0 + d)) -
                                 loglik(c, model.level_of(z0));
        if (std::log(stream.uniform()) < log_ratio) {
            state.z[c] = z0 + d;
            w[c] += diag * d;
            for (std::size_t k = 0; k < deg; ++k) w[nb[k]] -= d;
            ++accepted;
        }
    }
    return accepted;
}

//! Log weights of the augmented likelihood per level: log theta_l and log(nu max theta - theta_l).
inline std::pair<std::vector<double>, std::vector<double>> augmented_log_weights(const std::vector<double>& theta,
                                                                                 double nu) {
    const double top = nu * *std::max_element(theta.begin(), theta.end());
    std::vector<double> point_w(theta.size());
    std::vector<double> psi_w(theta.size());
    for (std::size_t l = 0; l < theta.size(); ++l) {
        point_w[l] = std::log(theta[l]);
        psi_w[l] = std::log(top - theta[l]);
    }
    return {point_w, psi_w};
}

//! Exact draw of psi given (theta, z): independent Poisson counts of rate nu max theta - lambda per cell.
inline void draw_psi(const LevelSetModel& model, const CoxGrid& grid, CoxState& state, double nu,
                     RandomStream& stream) {
    const double top = nu * *std::max_element(state.theta.begin(), state.theta.end());
    state.psi.resize(grid.cells());
    for (std::size_t c = 0; c < grid.cells(); ++c) {
        std::poisson_distribution<std::uint32_t> count((top - state.theta[model.level_of(state.z[c])]) *
                                                       grid.cell_area());
        state.psi[c] = count(stream);
    }
}

/*!
 * Independence Metropolis-Hastings for psi, cell by cell, proposing from the
 * homogeneous process of rate nu max theta - min theta. Returns the number of
 * accepted cells.
 */
inline std::size_t update_psi_independence(const LevelSetModel& model, const CoxGrid& grid, CoxState& state,
                                           double nu, RandomStream& stream) {
    const double top = nu * *std::max_element(state.theta.begin(), state.theta.end());
    const double rate = ags_psi_rate(state.theta, nu);
    std::poisson_distribution<std::uint32_t> proposal(rate * grid.cell_area());
    state.psi.resize(grid.cells(), 0);
    std::size_t accepted = 0;
    for (std::size_t c = 0; c < grid.cells(); ++c) {
        const std::uint32_t fresh = proposal(stream);
        const double log_w = std::log((top - state.theta[model.level_of(state.z[c])]) / rate);
        const double log_ratio = (static_cast<double>(fresh) - static_cast<double>(state.psi[c])) * log_w;
        if (std::log(stream.uniform()) < log_ratio) {
            state.psi[c] = fresh;
            ++accepted;
        }
    }
    return accepted;
}

//---------------------------------------------------------------------------//
// Collapsed theta update
//---------------------------------------------------------------------------//

enum class TileForm { Direct, Flipped };

//! Per-tile data for one level: which local cells lie in S_l and the points there.
struct TileLevel {
    std::uint64_t mask = 0;
    std::uint32_t points = 0;
    std::size_t cells = 1;  //!< cells per tile
    bool centroid_inside = false;

    double area() const { return static_cast<double>(std::popcount(mask)) / static_cast<double>(cells); }
};

inline std::vector<TileLevel> tile_levels(const CoxGrid& grid, const std::vector<std::size_t>& cell_level,
                                          std::size_t level) {
    std::vector<TileLevel> out(grid.tiles());
    for (std::size_t t = 0; t < grid.tiles(); ++t) {
        TileLevel& tl = out[t];
        tl.cells = grid.cells_per_tile();
        for (std::size_t k = 0; k < tl.cells; ++k) {
            const std::size_t c = grid.tile_cell(t, k);
            if (cell_level[c] == level) {
                tl.mask |= std::uint64_t{1} << k;
                tl.points += grid.point_counts()[c];
            }
        }
        tl.centroid_inside = (tl.mask >> grid.centroid_local()) & 1u;
    }
    return out;
}

namespace detail {

//! Poisson coin of exp(-height * |{cells selected by mask}|) over a unit tile.
inline BoundedPath tile_indicator_path(std::uint64_t mask, std::size_t cells, double height) {
    const double k = static_cast<double>(cells);
    return {[mask, cells, k, height](double s) {
                const auto cell = std::min(static_cast<std::size_t>(s * k), cells - 1);
                return ((mask >> cell) & 1u) ? height : 0.0;
            },
            0.0, height, 1.0};
}

}  // namespace detail

/*!
 * Factor pair for one tile with odds h(proposed) / h(current), where
 * h(x) = x^N exp(-x a), N and a the points and area of the tile in S_l.
 *
 * Direct form: side v (other o) is v^N times the coin
 * exp(-max(0, v - o) a). Flipped form: 1/h(v) is written as v^-N e^v times
 * the coin exp(-max(0, v - o) (1 - a)) and converted through the reciprocal
 * identity. Factors common to both sides are dropped.
 */
inline FactorPair tile_factor_pair(const TileLevel& tile, double current, double proposed, TileForm form) {
    const double n = static_cast<double>(tile.points);
    if (form == TileForm::Direct) {
        auto side = [&](double v, double o) {
            return poisson_weighted_coin(n * std::log(v),
                                         detail::tile_indicator_path(tile.mask, tile.cells, std::max(0.0, v - o)));
        };
        return {side(proposed, current), side(current, proposed)};
    }
    const std::uint64_t outside = ~tile.mask & ((tile.cells == 64) ? ~std::uint64_t{0} : ((std::uint64_t{1} << tile.cells) - 1));
    auto reciprocal = [&](double v, double o) {
        return poisson_weighted_coin(-n * std::log(v) + v,
                                     detail::tile_indicator_path(outside, tile.cells, std::max(0.0, v - o)));
    };
    return FactorPair::from_reciprocal(reciprocal(proposed, current), reciprocal(current, proposed));
}

//! Tile pair with the centroid rule: flipped form when the centroid lies in S_l.
inline FactorPair cgs_theta_leaf_pair(const TileLevel& tile, double current, double proposed) {
    return tile_factor_pair(tile, current, proposed, tile.centroid_inside ? TileForm::Flipped : TileForm::Direct);
}

/*!
 * Barker update of theta_l from pi(theta_l | z, y) through the DCBF over the
 * tiles. Proposals outside the prior support are rejected without a flip.
 */
template <class Proposal = UniformProposal>
BarkerResult cgs_theta_step(const LevelSetModel& model, const std::vector<TileLevel>& tiles, std::size_t level,
                            double current, const Proposal& proposal, const PartitionTree& tree,
                            const PortkeyConfig& portkey, RandomStream& stream, RandomStream& shuffle_stream,
                            CostLedger& ledger, const DcbfOptions& options = {}) {
    auto make = [&](double cur, double prop) {
        std::vector<FactorPair> factors;
        if (!model.in_support(level, prop)) return factors;
        factors.reserve(tiles.size());
        for (const auto& t : tiles) {
            factors.push_back(cgs_theta_leaf_pair(t, cur, prop));
        }
        return factors;
    };
    return barker_step(current, make, proposal, tree, portkey, stream, shuffle_stream, ledger, options);
}

//---------------------------------------------------------------------------//
// Chains
//---------------------------------------------------------------------------//

enum class CoxSampler { Augmented, Collapsed };

struct CoxConfig {
    double nu = 5.0;
    std::vector<double> delta{2.0, 4.0};  //!< collapsed proposal half-width delta_l / sqrt(n)
    std::optional<int> depth;              //!< default floor(log4 n)
    std::optional<double> leaf_escape;     //!< fixed leaf escape; calibrated when absent
    double target_escape = 0.1;
    std::size_t adapt_iters = 1000;
    std::size_t adapt_block = 100;
    double target_accept = 0.44;  //!< z moves and augmented theta moves
    bool update_z = true;
    bool parallel = false;
    DcbfOptions dcbf;
};

//! Kernel parameters fixed at the end of adaptation.
struct CoxTuning {
    double z_step = 0.5;
    std::vector<double> theta_width;  //!< augmented sampler RW half-widths
    std::vector<double> leaf_escape;  //!< collapsed sampler, per level
};

struct CoxRun {
    ChainTrace trace;
    CoxTuning tuning;
    CoxState final_state;
};

struct CoxSweepStats {
    std::size_t z_accepted = 0;
    std::vector<FlipOutcome> outcome;
    std::vector<CostLedger> ledger;
    std::vector<std::int64_t> time_ns;
};

namespace detail {

struct CoxStreams {
    RandomStream latent;
    RandomStream psi;
    std::vector<RandomStream> theta;
    std::vector<RandomStream> shuffle;

    CoxStreams(std::uint64_t seed, std::size_t levels)
        : latent(RandomStream(seed).split(0)), psi(RandomStream(seed).split(1)) {
        const RandomStream root(seed);
        for (std::size_t l = 0; l < levels; ++l) {
            theta.push_back(root.split(10 + l));
            shuffle.push_back(root.split(100 + l));
        }
    }
};

inline std::int64_t since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/*!
 * One sweep. Augmented: psi (independence MH), z, then each theta_l by
 * random-walk MH on the augmented target. Collapsed: each theta_l from
 * pi(theta_l | z, y) by the DCBF, then psi exactly and z given psi.
 */
inline CoxSweepStats cox_sweep(const LevelSetModel& model, const CoxGrid& grid, const CoxConfig& config,
                               CoxSampler sampler, const CoxTuning& tuning, const PartitionTree& tree,
                               CoxState& state, detail::CoxStreams& streams) {
    const std::size_t levels = model.levels();
    CoxSweepStats stats;
    stats.outcome.assign(levels, FlipOutcome::Tails);
    stats.ledger.assign(levels, CostLedger{});
    stats.time_ns.assign(levels, 0);
    auto latent_step = [&] {
        if (!config.update_z) return;
        const auto [pw, qw] = augmented_log_weights(state.theta, config.nu);
        stats.z_accepted = update_latent(model, grid, state, pw, qw, tuning.z_step, streams.latent);
    };

    if (sampler == CoxSampler::Augmented) {
        update_psi_independence(model, grid, state, config.nu, streams.psi);
        latent_step();
        const LevelSummary sum = summarize_levels(model, grid, state);
        for (std::size_t l = 0; l < levels; ++l) {
            const auto t0 = std::chrono::steady_clock::now();
            std::vector<double> proposed = state.theta;
            RandomStream& s = streams.theta[l];
            proposed[l] = state.theta[l] + tuning.theta_width[l] * (2.0 * s.uniform() - 1.0);
            const double log_ratio = ags_log_target(model, proposed, sum.points, sum.psi, grid.area(), config.nu) -
                                     ags_log_target(model, state.theta, sum.points, sum.psi, grid.area(), config.nu);
            if (std::log(s.uniform()) < log_ratio) {
                state.theta = proposed;
                stats.outcome[l] = FlipOutcome::Heads;
            }
            stats.time_ns[l] = detail::since(t0);
        }
        return stats;
    }

    const LevelSummary sum = summarize_levels(model, grid, state);
    auto update_level = [&](std::size_t l) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto tiles = tile_levels(grid, sum.cell_level, l);
        const UniformProposal proposal = scaled_proposal(config.delta[l], grid.tiles());
        const PortkeyConfig portkey = PortkeyConfig::leaf_escape(tuning.leaf_escape[l]);
        const BarkerResult r = cgs_theta_step(model, tiles, l, state.theta[l], proposal, tree, portkey,
                                              streams.theta[l], streams.shuffle[l], stats.ledger[l], config.dcbf);
        stats.outcome[l] = r.outcome;
        stats.time_ns[l] = detail::since(t0);
        return r.value;
    };
    std::vector<double> next(levels);
    if (config.parallel) {
        std::vector<std::future<double>> jobs;
        for (std::size_t l = 0; l < levels; ++l) {
            jobs.push_back(std::async(std::launch::async, update_level, l));
        }
        for (std::size_t l = 0; l < levels; ++l) next[l] = jobs[l].get();
    } else {
        for (std::size_t l = 0; l < levels; ++l) next[l] = update_level(l);
    }
    state.theta = next;
    draw_psi(model, grid, state, config.nu, streams.psi);
    latent_step();
    return stats;
}

/*!
 * Adapts (z step, augmented theta widths, Portkey leaf escape) over
 * config.adapt_iters sweeps, then records chain.iterations sweeps with the
 * kernels frozen. The trace holds every theta_l; outcome and cost columns
 * belong to the update of the last level. time_ns is that update's wall time
 * when record_time is set and 0 otherwise.
 */
inline CoxRun run_cox_chain(const LevelSetModel& model, const CoxDataset& data, const CoxConfig& config,
                            CoxSampler sampler, const ChainConfig& chain, CoxState state,
                            bool record_time = false) {
    model.validate();
    chain.validate();
    const CoxGrid grid(data, model.cells_per_unit);
    const std::size_t levels = model.levels();
    const std::size_t n = grid.tiles();
    if (state.theta.size() != levels || state.z.size() != grid.cells()) {
        throw std::invalid_argument("run_cox_chain: state does not match model and data");
    }
    if (config.delta.size() != levels) {
        throw std::invalid_argument("run_cox_chain: one delta per level required");
    }
    if (!(config.nu > 1.0)) throw std::invalid_argument("run_cox_chain: nu must exceed 1");
    for (std::size_t l = 0; l < levels; ++l) {
        if (!model.in_support(l, state.theta[l])) {
            throw std::invalid_argument("run_cox_chain: initial theta outside the prior support");
        }
    }
    const PartitionTree tree = build_tree(n, config.depth.value_or(default_depth(n)));
    detail::CoxStreams streams(chain.seed, levels);
    CoxTuning tuning;
    for (std::size_t l = 0; l < levels; ++l) {
        tuning.theta_width.push_back(config.delta[l] / std::sqrt(static_cast<double>(n)));
    }
    tuning.leaf_escape.assign(levels, config.leaf_escape.value_or(1.0 / static_cast<double>(n)));
    if (state.psi.empty()) draw_psi(model, grid, state, config.nu, streams.psi);

    // Adaptation: multiplicative updates once per block.
    std::size_t z_acc = 0;
    std::vector<std::size_t> accepted(levels, 0);
    std::vector<std::size_t> escaped(levels, 0);
    for (std::size_t it = 1; it <= config.adapt_iters; ++it) {
        const CoxSweepStats st = cox_sweep(model, grid, config, sampler, tuning, tree, state, streams);
        z_acc += st.z_accepted;
        for (std::size_t l = 0; l < levels; ++l) {
            accepted[l] += st.outcome[l] == FlipOutcome::Heads;
            escaped[l] += st.outcome[l] == FlipOutcome::Escaped;
        }
        if (it % config.adapt_block != 0) continue;
        const double block = static_cast<double>(config.adapt_block);
        auto factor = [](double ratio) { return std::clamp(ratio, 0.5, 2.0); };
        const double z_rate = static_cast<double>(z_acc) / (block * static_cast<double>(grid.cells()));
        tuning.z_step *= std::exp(z_rate - config.target_accept);
        for (std::size_t l = 0; l < levels; ++l) {
            const double acc = static_cast<double>(accepted[l]) / block;
            if (sampler == CoxSampler::Augmented) {
                tuning.theta_width[l] *= std::exp(2.0 * (acc - config.target_accept));
            } else if (!config.leaf_escape) {
                const double esc = static_cast<double>(escaped[l]) / block;
                tuning.leaf_escape[l] =
                    std::clamp(tuning.leaf_escape[l] * factor(config.target_escape / std::max(esc, 1e-3)), 1e-7, 0.5);
            }
        }
        z_acc = 0;
        std::fill(accepted.begin(), accepted.end(), 0);
        std::fill(escaped.begin(), escaped.end(), 0);
    }

    CoxRun run;
    run.tuning = tuning;
    run.trace.num_params = levels;
    run.trace.rows.reserve(chain.iterations / chain.thinning);
    for (std::size_t it = 0; it < chain.iterations; ++it) {
        const CoxSweepStats st = cox_sweep(model, grid, config, sampler, tuning, tree, state, streams);
        if (it % chain.thinning != 0) continue;
        const CostLedger& cost = st.ledger.back();
        TraceRow row;
        row.iter = it;
        row.theta = state.theta;
        row.outcome = st.outcome.back();
        row.leaf_outputs = cost.leaf_outputs;
        row.leaf_loops = cost.leaf_loops;
        row.merge_loops = cost.merge_loops;
        row.time_ns = record_time ? st.time_ns.back() : 0;
        run.trace.rows.push_back(std::move(row));
    }
    run.final_state = std::move(state);
    return run;
}

//! Starting state with the given field and intensities; psi is drawn at the start of the run.
inline CoxState initial_cox_state(const LatentField& field, std::vector<double> theta) {
    return {std::move(theta), field.values, {}};
}

}  // namespace dcbf
