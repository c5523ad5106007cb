#pragma once

// Pair mining over feature vectors: K-means coarse clusters, then two union-find passes
// inside each cluster (turn 1 on the primary features, turn 2 on task features within each
// turn-1 set), then pair harvesting and band filtering.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ace/instruction_codec.hpp"

namespace ace::pairs {

struct FeatureSet {
    RowMatrix<float> primary;  // one unit-norm row per item
    RowMatrix<float> task;     // optional, same row count when present

    int size() const { return static_cast<int>(primary.rows()); }
    bool has_task() const { return task.rows() > 0; }
};

/// Throws std::invalid_argument when a row is not unit-norm within `tol` or shapes disagree.
void check_features(const FeatureSet& features, double tol = 1e-5);
/// Normalizes rows in place; zero rows are rejected.
void normalize_rows(RowMatrix<float>& m);

class DisjointSetForest {
public:
    explicit DisjointSetForest(int n);

    int find(int x);
    /// Returns true when two different sets were merged.
    bool unite(int a, int b);
    int size() const { return static_cast<int>(parent_.size()); }
    int set_count() const { return sets_; }
    /// Sets with sorted members, ordered by smallest member.
    std::vector<std::vector<int>> groups();

private:
    std::vector<int> parent_;
    std::vector<int> rank_;
    int sets_;
};

struct KMeansResult {
    std::vector<int> assignment;
    RowMatrix<float> centroids;
    double inertia = 0.0;
    int iterations = 0;
};

/// k-means++ seeding then Lloyd iterations (squared Euclidean). An emptied cluster is
/// re-seeded with the point farthest from its centroid.
KMeansResult kmeans(const RowMatrix<float>& points, int k, std::uint64_t seed, int max_iters = 100);

/// Interval predicate on a similarity score.
struct Band {
    double lo = 0.0;
    double hi = 0.0;
    bool lo_inclusive = false;
    bool hi_inclusive = false;

    bool contains(double s) const;
    bool empty() const { return lo > hi || (lo == hi && !(lo_inclusive && hi_inclusive)); }
};

/// 0.8 < s < 0.9 (excludes near-duplicates at the top).
Band face_band();
/// s >= 0.65.
Band style_threshold();
/// s > 0.65.
Band face_keep();
/// Parses "lo,hi" with optional brackets: "(0.8,0.9)", "[0.65,inf]". Bare "lo,hi" is open.
Band parse_band(const std::string& text);

using SimilarityFn = std::function<double(int a, int b)>;
using LinkPredicate = std::function<bool(double)>;

/// Forest over positions 0..members.size()-1 joining every pair whose similarity satisfies
/// the predicate.
DisjointSetForest union_find_pass(const std::vector<int>& members, const SimilarityFn& similarity,
                                  const LinkPredicate& link);

struct Cluster {
    int id = 0;
    int coarse = 0;  // k-means cluster
    int turn1 = 0;   // turn-1 set index inside the coarse cluster
    std::vector<int> members;
};

struct AggregatorConfig {
    int k = 8;
    std::uint64_t seed = 0;
    int max_iters = 100;
    Band turn1 = style_threshold();
    Band turn2 = face_band();
    int threads = 1;
};

/// Final (turn-2) sets; disjoint and covering every item. Ordered by (coarse, smallest member).
std::vector<Cluster> aggregate(const FeatureSet& features, const AggregatorConfig& config);

using ItemPair = std::pair<int, int>;

/// All unordered pairs (a before b in member order); with `ordered` each pair also appears reversed.
std::vector<ItemPair> harvest_pairs(const std::vector<int>& members, bool ordered = false);

struct ScoredPair {
    int a = 0;
    int b = 0;
    double score = 0.0;
};

/// Keeps pairs whose score lies inside the band, in input order.
std::vector<ScoredPair> filter_pairs(const std::vector<ItemPair>& pairs, const SimilarityFn& score, const Band& band);

double cosine(const RowMatrix<float>& m, int a, int b);

// Binary feature file: uint32 count, uint32 dim, then count*dim float32, all little-endian.
void write_features(const std::filesystem::path& path, const RowMatrix<float>& m);
RowMatrix<float> read_features(const std::filesystem::path& path);

std::string clusters_manifest(const std::vector<Cluster>& clusters);
std::string pairs_manifest(const std::vector<ScoredPair>& pairs);

struct PlantedData {
    FeatureSet features;
    std::vector<int> labels;  // planted cluster of each item
};

/// Items in `clusters` groups of `per_cluster`. Within a group, primary cosine is
/// `primary_sim` and task cosine is `task_sim`; across groups both are 0. Item order is shuffled.
PlantedData planted_clusters(int clusters, int per_cluster, std::uint64_t seed, double primary_sim = 0.95,
                             double task_sim = 0.85);

}  // namespace ace::pairs
