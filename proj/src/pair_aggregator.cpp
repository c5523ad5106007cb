#include "ace/pair_aggregator.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <Eigen/QR>

#include "ace/util.hpp"

namespace ace::pairs {

void check_features(const FeatureSet& f, double tol) {
    if (f.has_task() && f.task.rows() != f.primary.rows()) {
        throw std::invalid_argument("task features must have one row per item");
    }
    auto check = [tol](const RowMatrix<float>& m, const char* what) {
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            const double n = m.row(r).cast<double>().norm();
            if (std::abs(n - 1.0) > tol) {
                throw std::invalid_argument(std::string(what) + " feature row " + std::to_string(r) +
                                            " is not unit-norm (" + std::to_string(n) + ")");
            }
        }
    };
    check(f.primary, "primary");
    if (f.has_task()) check(f.task, "task");
}

void normalize_rows(RowMatrix<float>& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const double n = m.row(r).cast<double>().norm();
        if (n == 0.0) throw std::invalid_argument("cannot normalize a zero feature row");
        m.row(r) = (m.row(r).cast<double>() / n).cast<float>();
    }
}

// ---------------------------------------------------------------------------

DisjointSetForest::DisjointSetForest(int n) : parent_(static_cast<std::size_t>(n)), rank_(static_cast<std::size_t>(n), 0), sets_(n) {
    if (n < 0) throw std::invalid_argument("negative forest size");
    std::iota(parent_.begin(), parent_.end(), 0);
}

int DisjointSetForest::find(int x) {
    if (x < 0 || x >= size()) throw std::out_of_range("forest index out of range");
    int root = x;
    while (parent_[static_cast<std::size_t>(root)] != root) root = parent_[static_cast<std::size_t>(root)];
    while (parent_[static_cast<std::size_t>(x)] != root) {
        const int next = parent_[static_cast<std::size_t>(x)];
        parent_[static_cast<std::size_t>(x)] = root;
        x = next;
    }
    return root;
}

bool DisjointSetForest::unite(int a, int b) {
    int ra = find(a), rb = find(b);
    if (ra == rb) return false;
    auto& rka = rank_[static_cast<std::size_t>(ra)];
    auto& rkb = rank_[static_cast<std::size_t>(rb)];
    if (rka < rkb) std::swap(ra, rb);
    parent_[static_cast<std::size_t>(rb)] = ra;
    if (rka == rkb) ++rank_[static_cast<std::size_t>(ra)];
    --sets_;
    return true;
}

std::vector<std::vector<int>> DisjointSetForest::groups() {
    std::vector<int> slot(parent_.size(), -1);
    std::vector<std::vector<int>> out;
    for (int i = 0; i < size(); ++i) {
        const int r = find(i);
        auto& s = slot[static_cast<std::size_t>(r)];
        if (s < 0) {
            s = static_cast<int>(out.size());
            out.emplace_back();
        }
        out[static_cast<std::size_t>(s)].push_back(i);
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

double sq_dist(const RowMatrix<float>& a, Eigen::Index i, const RowMatrix<float>& b, Eigen::Index j) {
    return (a.row(i).cast<double>() - b.row(j).cast<double>()).squaredNorm();
}

// Index drawn with probability proportional to weights; falls back to uniform when all are zero.
std::size_t weighted_pick(Rng& rng, const std::vector<double>& w) {
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    if (total <= 0.0) return static_cast<std::size_t>(uniform_index(rng, w.size()));
    const double r = uniform_draw(rng) * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        acc += w[i];
        if (r < acc) return i;
    }
    return w.size() - 1;
}

}  // namespace

KMeansResult kmeans(const RowMatrix<float>& points, int k, std::uint64_t seed, int max_iters) {
    const auto n = static_cast<int>(points.rows());
    if (k < 1 || k > n) throw std::invalid_argument("kmeans: k must lie in [1, item count]");
    Rng rng(derive_seed(seed, {0x6b6d}));

    // Greedy k-means++: several D^2-sampled candidates per round, keep the one that lowers
    // the potential most.
    KMeansResult res;
    res.centroids.resize(k, points.cols());
    std::vector<double> d2(static_cast<std::size_t>(n));
    const auto first = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(n)));
    res.centroids.row(0) = points.row(first);
    for (int i = 0; i < n; ++i) d2[static_cast<std::size_t>(i)] = sq_dist(points, i, res.centroids, 0);
    const int trials = 2 + static_cast<int>(std::log(static_cast<double>(k)));
    for (int c = 1; c < k; ++c) {
        double best_potential = std::numeric_limits<double>::infinity();
        std::size_t best = 0;
        std::vector<double> best_d2;
        for (int t = 0; t < trials; ++t) {
            const std::size_t cand = weighted_pick(rng, d2);
            std::vector<double> nd(d2);
            double potential = 0.0;
            for (int i = 0; i < n; ++i) {
                auto& v = nd[static_cast<std::size_t>(i)];
                v = std::min(v, sq_dist(points, i, points, static_cast<Eigen::Index>(cand)));
                potential += v;
            }
            if (potential < best_potential) {
                best_potential = potential;
                best = cand;
                best_d2 = std::move(nd);
            }
        }
        res.centroids.row(c) = points.row(static_cast<Eigen::Index>(best));
        d2 = std::move(best_d2);
    }

    res.assignment.assign(static_cast<std::size_t>(n), -1);
    for (res.iterations = 0; res.iterations < max_iters; ++res.iterations) {
        bool changed = false;
        for (int i = 0; i < n; ++i) {
            int arg = 0;
            double best = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                const double d = sq_dist(points, i, res.centroids, c);
                if (d < best) {
                    best = d;
                    arg = c;
                }
            }
            if (res.assignment[static_cast<std::size_t>(i)] != arg) {
                res.assignment[static_cast<std::size_t>(i)] = arg;
                changed = true;
            }
        }
        std::vector<int> counts(static_cast<std::size_t>(k), 0);
        RowMatrix<double> sums = RowMatrix<double>::Zero(k, points.cols());
        for (int i = 0; i < n; ++i) {
            const int c = res.assignment[static_cast<std::size_t>(i)];
            ++counts[static_cast<std::size_t>(c)];
            sums.row(c) += points.row(i).cast<double>();
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) {
                res.centroids.row(c) = (sums.row(c) / counts[static_cast<std::size_t>(c)]).cast<float>();
                continue;
            }
            // Empty cluster: move it onto the point farthest from its current centroid.
            int far = 0;
            double far_d = -1.0;
            for (int i = 0; i < n; ++i) {
                const int a = res.assignment[static_cast<std::size_t>(i)];
                if (counts[static_cast<std::size_t>(a)] <= 1) continue;
                const double d = sq_dist(points, i, res.centroids, a);
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            --counts[static_cast<std::size_t>(res.assignment[static_cast<std::size_t>(far)])];
            res.assignment[static_cast<std::size_t>(far)] = c;
            counts[static_cast<std::size_t>(c)] = 1;
            res.centroids.row(c) = points.row(far);
            changed = true;
        }
        if (!changed) break;
    }
    res.inertia = 0.0;
    for (int i = 0; i < n; ++i) res.inertia += sq_dist(points, i, res.centroids, res.assignment[static_cast<std::size_t>(i)]);
    return res;
}

// ---------------------------------------------------------------------------

bool Band::contains(double s) const {
    const bool above = lo_inclusive ? s >= lo : s > lo;
    const bool below = hi_inclusive ? s <= hi : s < hi;
    return above && below;
}

Band face_band() { return {0.8, 0.9, false, false}; }
Band style_threshold() { return {0.65, std::numeric_limits<double>::infinity(), true, false}; }
Band face_keep() { return {0.65, std::numeric_limits<double>::infinity(), false, false}; }

Band parse_band(const std::string& text) {
    std::string t;
    for (char c : text) {
        if (!std::isspace(static_cast<unsigned char>(c))) t += c;
    }
    Band b;
    if (!t.empty() && (t.front() == '[' || t.front() == '(')) {
        b.lo_inclusive = t.front() == '[';
        t.erase(0, 1);
    }
    if (!t.empty() && (t.back() == ']' || t.back() == ')')) {
        b.hi_inclusive = t.back() == ']';
        t.pop_back();
    }
    const auto comma = t.find(',');
    if (comma == std::string::npos) throw std::invalid_argument("band must look like lo,hi: '" + text + "'");
    auto value = [&](const std::string& s) {
        if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument("bad band bound '" + s + "'");
        return v;
    };
    try {
        b.lo = value(t.substr(0, comma));
        b.hi = value(t.substr(comma + 1));
    } catch (const std::logic_error&) {
        throw std::invalid_argument("band must look like lo,hi: '" + text + "'");
    }
    return b;
}

DisjointSetForest union_find_pass(const std::vector<int>& members, const SimilarityFn& similarity,
                                  const LinkPredicate& link) {
    DisjointSetForest forest(static_cast<int>(members.size()));
    for (std::size_t i = 0; i < members.size(); ++i) {
        for (std::size_t j = i + 1; j < members.size(); ++j) {
            if (link(similarity(members[i], members[j]))) forest.unite(static_cast<int>(i), static_cast<int>(j));
        }
    }
    return forest;
}

double cosine(const RowMatrix<float>& m, int a, int b) {
    return m.row(a).cast<double>().dot(m.row(b).cast<double>());
}

std::vector<Cluster> aggregate(const FeatureSet& features, const AggregatorConfig& config) {
    check_features(features);
    if (config.threads < 1) throw std::invalid_argument("threads must be positive");
    const auto coarse = kmeans(features.primary, config.k, config.seed, config.max_iters);

    std::vector<std::vector<int>> coarse_members(static_cast<std::size_t>(config.k));
    for (int i = 0; i < features.size(); ++i) {
        coarse_members[static_cast<std::size_t>(coarse.assignment[static_cast<std::size_t>(i)])].push_back(i);
    }

    const SimilarityFn primary_sim = [&](int a, int b) { return cosine(features.primary, a, b); };
    const SimilarityFn task_sim = [&](int a, int b) {
        return cosine(features.has_task() ? features.task : features.primary, a, b);
    };
    const LinkPredicate link1 = [&](double s) { return config.turn1.contains(s); };
    const LinkPredicate link2 = [&](double s) { return config.turn2.contains(s); };

    // Each coarse cluster is independent; results land in fixed slots so the merge order
    // never depends on scheduling.
    std::vector<std::vector<Cluster>> per_coarse(coarse_members.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t c = next++; c < coarse_members.size(); c = next++) {
            const auto& members = coarse_members[c];
            auto turn1 = union_find_pass(members, primary_sim, link1).groups();
            for (std::size_t s = 0; s < turn1.size(); ++s) {
                std::vector<int> ids;
                for (int local : turn1[s]) ids.push_back(members[static_cast<std::size_t>(local)]);
                for (const auto& g : union_find_pass(ids, task_sim, link2).groups()) {
                    Cluster cl;
                    cl.coarse = static_cast<int>(c);
                    cl.turn1 = static_cast<int>(s);
                    for (int local : g) cl.members.push_back(ids[static_cast<std::size_t>(local)]);
                    per_coarse[c].push_back(std::move(cl));
                }
            }
        }
    };
    const int n_threads = std::min<int>(config.threads, static_cast<int>(coarse_members.size()));
    std::vector<std::thread> pool;
    for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    std::vector<Cluster> out;
    for (auto& v : per_coarse) {
        for (auto& cl : v) out.push_back(std::move(cl));
    }
    for (auto& cl : out) std::sort(cl.members.begin(), cl.members.end());
    std::sort(out.begin(), out.end(), [](const Cluster& a, const Cluster& b) {
        return a.coarse != b.coarse ? a.coarse < b.coarse : a.members.front() < b.members.front();
    });
    for (std::size_t i = 0; i < out.size(); ++i) out[i].id = static_cast<int>(i);
    return out;
}

std::vector<ItemPair> harvest_pairs(const std::vector<int>& members, bool ordered) {
    std::vector<ItemPair> out;
    for (std::size_t i = 0; i < members.size(); ++i) {
        for (std::size_t j = i + 1; j < members.size(); ++j) {
            out.emplace_back(members[i], members[j]);
            if (ordered) out.emplace_back(members[j], members[i]);
        }
    }
    return out;
}

std::vector<ScoredPair> filter_pairs(const std::vector<ItemPair>& pairs, const SimilarityFn& score, const Band& band) {
    std::vector<ScoredPair> out;
    if (band.empty()) return out;
    for (const auto& [a, b] : pairs) {
        const double s = score(a, b);
        if (band.contains(s)) out.push_back({a, b, s});
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("truncated feature file");
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

}  // namespace

void write_features(const std::filesystem::path& path, const RowMatrix<float>& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    put_u32(os, static_cast<std::uint32_t>(m.rows()));
    put_u32(os, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) put_u32(os, std::bit_cast<std::uint32_t>(m.data()[i]));
}

RowMatrix<float> read_features(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    const std::uint32_t count = get_u32(is), dim = get_u32(is);
    const auto expected = 8 + static_cast<std::uintmax_t>(count) * dim * 4;
    if (std::filesystem::file_size(path) != expected) {
        throw std::runtime_error("feature file size does not match its header: " + path.string());
    }
    RowMatrix<float> m(count, dim);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<float>(get_u32(is));
    return m;
}

std::string clusters_manifest(const std::vector<Cluster>& clusters) {
    std::ostringstream os;
    os << "# cluster coarse turn1 size: members\n";
    for (const auto& c : clusters) {
        os << c.id << ' ' << c.coarse << ' ' << c.turn1 << ' ' << c.members.size() << ':';
        for (int m : c.members) os << ' ' << m;
        os << '\n';
    }
    return os.str();
}

std::string pairs_manifest(const std::vector<ScoredPair>& pairs) {
    std::ostringstream os;
    os << "# a b score\n";
    os.precision(6);
    os << std::fixed;
    for (const auto& p : pairs) os << p.a << ' ' << p.b << ' ' << p.score << '\n';
    return os.str();
}

PlantedData planted_clusters(int clusters, int per_cluster, std::uint64_t seed, double primary_sim, double task_sim) {
    if (clusters < 1 || per_cluster < 1) throw std::invalid_argument("planted clusters need positive sizes");
    if (!(primary_sim > 0 && primary_sim < 1 && task_sim > 0 && task_sim < 1)) {
        throw std::invalid_argument("planted similarities must lie in (0,1)");
    }
    const int n = clusters * per_cluster;
    const int dim = clusters * (per_cluster + 1);
    Rng rng(derive_seed(seed, {0x91a7}));

    auto basis = [&] {
        Eigen::MatrixXd g(dim, dim);
        for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = normal_draw(rng);
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
        return Eigen::MatrixXd(qr.householderQ());
    };

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int i = n - 1; i > 0; --i) {
        std::swap(order[static_cast<std::size_t>(i)], order[uniform_index(rng, static_cast<std::uint64_t>(i) + 1)]);
    }

    PlantedData out;
    out.labels.resize(static_cast<std::size_t>(n));
    auto build = [&](double sim) {
        const Eigen::MatrixXd q = basis();
        RowMatrix<float> m(n, dim);
        const double a = std::sqrt(sim), b = std::sqrt(1.0 - sim);
        for (int c = 0; c < clusters; ++c) {
            for (int j = 0; j < per_cluster; ++j) {
                const int item = order[static_cast<std::size_t>(c * per_cluster + j)];
                const int center = c * (per_cluster + 1);
                const Eigen::VectorXd v = a * q.col(center) + b * q.col(center + 1 + j);
                m.row(item) = v.transpose().cast<float>();
                out.labels[static_cast<std::size_t>(item)] = c;
            }
        }
        normalize_rows(m);
        return m;
    };
    out.features.primary = build(primary_sim);
    out.features.task = build(task_sim);
    return out;
}

}  // namespace ace::pairs
