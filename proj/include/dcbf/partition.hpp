// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcbf/rng.hpp"

namespace dcbf {

/*!
 * Binary partition of n factor indices into 2^depth leaf batches.
 *
 * Slots 0..n-1 are split by recursive halving (the left child takes the
 * ceiling), which keeps leaf batch sizes within one of each other. Factors
 * are placed in slots by a permutation; build_tree() uses the identity and
 * shuffled() draws a uniform one. Leaves are numbered left to right, so the
 * leaf number read from the most significant bit down gives the branch taken
 * at each level.
 */
class PartitionTree {
  public:
    PartitionTree() = default;

    std::size_t size() const { return slot_of_factor_.size(); }
    int depth() const { return depth_; }
    std::size_t leaf_count() const { return std::size_t{1} << depth_; }

    //! Heap index of a leaf: the root is node 1 and leaves start at 2^depth.
    std::size_t leaf_node(std::size_t leaf) const { return leaf_count() + leaf; }

    std::size_t slot_of(std::size_t factor) const { return slot_of_factor_.at(factor); }

    std::size_t leaf_of(std::size_t factor) const {
        const std::size_t slot = slot_of(factor);
        const auto it = std::upper_bound(leaf_begin_.begin(), leaf_begin_.end(), slot);
        return static_cast<std::size_t>(it - leaf_begin_.begin()) - 1;
    }

    //! Branch prefix of a factor at level k, as a number in [0, 2^k).
    std::size_t prefix_of(std::size_t factor, int level) const {
        if (level < 0 || level > depth_) {
            throw std::out_of_range("PartitionTree::prefix_of: level out of range");
        }
        return leaf_of(factor) >> (depth_ - level);
    }

    //! Label in {1,2}^k, e.g. "12" for left-then-right.
    std::string label_of(std::size_t factor, int level) const {
        const std::size_t prefix = prefix_of(factor, level);
        std::string label;
        for (int k = level - 1; k >= 0; --k) {
            label.push_back(((prefix >> k) & 1u) ? '2' : '1');
        }
        return label;
    }

    //! Number of factors in each leaf.
    std::vector<std::size_t> leaf_sizes() const {
        std::vector<std::size_t> sizes(leaf_count());
        for (std::size_t leaf = 0; leaf < leaf_count(); ++leaf) {
            sizes[leaf] = leaf_begin_[leaf + 1] - leaf_begin_[leaf];
        }
        return sizes;
    }

    //! Factor indices per leaf, in slot order.
    std::vector<std::vector<std::size_t>> leaf_members() const {
        std::vector<std::size_t> factor_at_slot(size());
        for (std::size_t f = 0; f < size(); ++f) {
            factor_at_slot[slot_of_factor_[f]] = f;
        }
        std::vector<std::vector<std::size_t>> members(leaf_count());
        for (std::size_t leaf = 0; leaf < leaf_count(); ++leaf) {
            members[leaf].assign(factor_at_slot.begin() + static_cast<std::ptrdiff_t>(leaf_begin_[leaf]),
                                 factor_at_slot.begin() + static_cast<std::ptrdiff_t>(leaf_begin_[leaf + 1]));
        }
        return members;
    }

    //! Copy with a uniformly random factor-to-slot permutation.
    PartitionTree shuffled(RandomStream& stream) const {
        PartitionTree out = *this;
        std::shuffle(out.slot_of_factor_.begin(), out.slot_of_factor_.end(), stream);
        return out;
    }

    friend PartitionTree build_tree(std::size_t n, int depth);

  private:
    void split(std::size_t begin, std::size_t end, int level) {
        if (level == depth_) {
            leaf_begin_.push_back(begin);
            return;
        }
        const std::size_t mid = begin + (end - begin + 1) / 2;
        split(begin, mid, level + 1);
        split(mid, end, level + 1);
    }

    int depth_ = 0;
    std::vector<std::size_t> slot_of_factor_;
    std::vector<std::size_t> leaf_begin_;  // size leaf_count()+1
};

//! Contiguous balanced tree over n factors with 2^depth leaves.
inline PartitionTree build_tree(std::size_t n, int depth) {
    if (depth < 0 || depth > 30) {
        throw std::invalid_argument("build_tree: depth out of range");
    }
    if (n == 0 || (std::size_t{1} << depth) > n) {
        throw std::invalid_argument("build_tree: need 2^depth <= n (n=" + std::to_string(n) +
                                    ", depth=" + std::to_string(depth) + ")");
    }
    PartitionTree tree;
    tree.depth_ = depth;
    tree.slot_of_factor_.resize(n);
    std::iota(tree.slot_of_factor_.begin(), tree.slot_of_factor_.end(), std::size_t{0});
    tree.split(0, n, 0);
    tree.leaf_begin_.push_back(n);
    return tree;
}

inline PartitionTree shuffle_assignment(const PartitionTree& tree, RandomStream& stream) {
    return tree.shuffled(stream);
}

//! floor(log_4 n), the depth that keeps leaf batches near sqrt(n).
inline int default_depth(std::size_t n) {
    int depth = 0;
    while ((std::size_t{1} << (2 * (depth + 1))) <= n) {
        ++depth;
    }
    return depth;
}

//! Merge overhead when every node is balanced: 4^depth.
inline double predicted_overhead_balanced(int depth) {
    if (depth < 0) {
        throw std::invalid_argument("predicted_overhead_balanced: negative depth");
    }
    return std::ldexp(1.0, 2 * depth);
}

namespace detail {

//! Mean over uniformly random m-subsets of prod ratio[i], for every m.
inline std::vector<double> subset_product_means(const std::vector<double>& ratio) {
    const std::size_t n = ratio.size();
    std::vector<double> mean(n + 1, 0.0);
    mean[0] = 1.0;
    for (std::size_t k = 1; k <= n; ++k) {
        const double r = ratio[k - 1];
        for (std::size_t m = k; m >= 1; --m) {
            const double keep = static_cast<double>(k - m) / static_cast<double>(k);
            const double take = static_cast<double>(m) / static_cast<double>(k);
            mean[m] = keep * mean[m] + take * r * mean[m - 1];
        }
    }
    return mean;
}

inline std::vector<double> checked_log_ratios(const std::vector<double>& f_current,
                                              const std::vector<double>& f_proposed) {
    if (f_current.size() != f_proposed.size() || f_current.empty()) {
        throw std::invalid_argument("predicted_overhead_randomized: factor vectors must match and be non-empty");
    }
    std::vector<double> log_ratio(f_current.size());
    for (std::size_t i = 0; i < f_current.size(); ++i) {
        if (f_current[i] == 0.0 && f_proposed[i] == 0.0) {
            throw std::domain_error("predicted_overhead_randomized: factor " + std::to_string(i) +
                                    " vanishes at both parameter values");
        }
        if (!(f_current[i] > 0.0) || !(f_proposed[i] > 0.0)) {
            throw std::domain_error("predicted_overhead_randomized: factors must be positive");
        }
        log_ratio[i] = std::log(f_proposed[i]) - std::log(f_current[i]);
    }
    return log_ratio;
}

}  // namespace detail

/*!
 * Expected merge overhead over uniformly random batch assignments:
 *
 *   2^l (1 + 2 r0 sum_{j=1}^{2^l - 1} E[prod_{i <= n j / 2^l} f_s(i)(proposed) / f_s(i)(current)])
 *
 * with r0 = h0(current) / (h0(current) + h0(proposed)). With
 * num_permutations == 0 the expectation is exact (subset means of the
 * ratios); otherwise it is a Monte Carlo average over that many permutations.
 * Requires 2^depth to divide n.
 */
inline double predicted_overhead_randomized(const std::vector<double>& f_current,
                                            const std::vector<double>& f_proposed, int depth,
                                            std::size_t num_permutations, RandomStream* stream = nullptr) {
    const auto log_ratio = detail::checked_log_ratios(f_current, f_proposed);
    const std::size_t n = log_ratio.size();
    const std::size_t leaves = std::size_t{1} << depth;
    if (depth < 0 || leaves > n || n % leaves != 0) {
        throw std::invalid_argument("predicted_overhead_randomized: 2^depth must divide n");
    }
    const std::size_t batch = n / leaves;
    const double total_log = std::accumulate(log_ratio.begin(), log_ratio.end(), 0.0);
    const double r0_reverse = 1.0 / (1.0 + std::exp(total_log));

    double sum = 0.0;
    if (num_permutations == 0) {
        std::vector<double> ratio(n);
        std::transform(log_ratio.begin(), log_ratio.end(), ratio.begin(), [](double x) { return std::exp(x); });
        const auto mean = detail::subset_product_means(ratio);
        for (std::size_t j = 1; j < leaves; ++j) {
            sum += mean[j * batch];
        }
    } else {
        if (stream == nullptr) {
            throw std::invalid_argument("predicted_overhead_randomized: Monte Carlo mode needs a stream");
        }
        std::vector<double> perm = log_ratio;
        for (std::size_t rep = 0; rep < num_permutations; ++rep) {
            std::shuffle(perm.begin(), perm.end(), *stream);
            double partial = 0.0;
            std::size_t taken = 0;
            for (std::size_t j = 1; j < leaves; ++j) {
                for (; taken < j * batch; ++taken) {
                    partial += perm[taken];
                }
                sum += std::exp(partial) / static_cast<double>(num_permutations);
            }
        }
    }
    return static_cast<double>(leaves) * (1.0 + 2.0 * r0_reverse * sum);
}

}  // namespace dcbf
