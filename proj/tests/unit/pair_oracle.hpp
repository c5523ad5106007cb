#pragma once

// Brute-force reference for the two-pass aggregation: connected components by BFS over the
// explicit link graph, first on primary similarity inside each coarse cluster, then on task
// similarity inside each turn-1 component.

#include <algorithm>
#include <set>
#include <vector>

#include "ace/pair_aggregator.hpp"

namespace ace::test {

inline std::vector<std::vector<int>> bfs_components(const std::vector<int>& items,
                                                    const pairs::SimilarityFn& sim, const pairs::Band& band) {
    const std::size_t n = items.size();
    std::vector<std::vector<bool>> adj(n, std::vector<bool>(n, false));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i != j) adj[i][j] = band.contains(sim(items[std::min(i, j)], items[std::max(i, j)]));
        }
    }
    std::vector<bool> seen(n, false);
    std::vector<std::vector<int>> out;
    for (std::size_t s = 0; s < n; ++s) {
        if (seen[s]) continue;
        std::vector<std::size_t> queue{s};
        seen[s] = true;
        std::vector<int> comp;
        for (std::size_t q = 0; q < queue.size(); ++q) {
            comp.push_back(items[queue[q]]);
            for (std::size_t j = 0; j < n; ++j) {
                if (adj[queue[q]][j] && !seen[j]) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        std::sort(comp.begin(), comp.end());
        out.push_back(std::move(comp));
    }
    return out;
}

/// Final sets as a canonical set of sorted member lists.
inline std::set<std::vector<int>> closure_oracle(const pairs::FeatureSet& f, const pairs::AggregatorConfig& cfg) {
    const auto coarse = pairs::kmeans(f.primary, cfg.k, cfg.seed, cfg.max_iters);
    const auto& task = f.has_task() ? f.task : f.primary;
    const pairs::SimilarityFn primary = [&](int a, int b) {
        return f.primary.row(a).cast<double>().dot(f.primary.row(b).cast<double>());
    };
    const pairs::SimilarityFn task_sim = [&](int a, int b) {
        return task.row(a).cast<double>().dot(task.row(b).cast<double>());
    };
    std::set<std::vector<int>> out;
    for (int c = 0; c < cfg.k; ++c) {
        std::vector<int> members;
        for (int i = 0; i < f.size(); ++i) {
            if (coarse.assignment[static_cast<std::size_t>(i)] == c) members.push_back(i);
        }
        for (const auto& t1 : bfs_components(members, primary, cfg.turn1)) {
            for (auto& t2 : bfs_components(t1, task_sim, cfg.turn2)) out.insert(std::move(t2));
        }
    }
    return out;
}

inline std::set<std::vector<int>> canonical(const std::vector<pairs::Cluster>& clusters) {
    std::set<std::vector<int>> out;
    for (const auto& c : clusters) out.insert(c.members);
    return out;
}

}  // namespace ace::test
