#include "topogate/topology.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "topogate/csv_io.hpp"
#include "topogate/errors.hpp"
#include "topogate/quality.hpp"

namespace topogate {

double PersistenceDiagram::total_persistence() const {
    double t = 0.0;
    for (const auto& p : points) t += p.second - p.first;
    return t;
}

double PersistenceDiagram::max_persistence() const {
    double m = 0.0;
    for (const auto& p : points) m = std::max(m, p.second - p.first);
    return m;
}

namespace {

struct UnionFind {
    std::vector<int> parent;
    explicit UnionFind(int n) : parent(n, -1) {}
    int find(int x) {
        int root = x;
        while (parent[root] != root) root = parent[root];
        while (parent[x] != root) {
            int next = parent[x];
            parent[x] = root;
            x = next;
        }
        return root;
    }
};

}  // namespace

PersistenceDiagram sublevel_persistence_h0(const Volume& v) {
    if (v.size() == 0) throw Error("sublevel_persistence_h0: empty volume");

    const int nx = v.dims[0], ny = v.dims[1], nz = v.dims[2];
    const int n = static_cast<int>(v.size());

    // Filtration order: by value, ties broken by linear voxel index.
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return v.data[a] < v.data[b] || (v.data[a] == v.data[b] && a < b);
    });
    std::vector<int> rank(n);
    for (int r = 0; r < n; ++r) rank[order[r]] = r;

    UnionFind uf(n);
    std::vector<double> birth_value(n);  // per component root
    std::vector<int> birth_rank(n);

    PersistenceDiagram diagram;
    const int neighbor_step[3] = {1, nx, nx * ny};

    for (int r = 0; r < n; ++r) {
        const int p = order[r];
        uf.parent[p] = p;
        birth_value[p] = v.data[p];
        birth_rank[p] = r;

        const int x = p % nx;
        const int y = (p / nx) % ny;
        const int z = p / (nx * ny);
        const int coord[3] = {x, y, z};
        const int lim[3] = {nx, ny, nz};

        for (int axis = 0; axis < 3; ++axis) {
            for (int dir = -1; dir <= 1; dir += 2) {
                const int c = coord[axis] + dir;
                if (c < 0 || c >= lim[axis]) continue;
                const int q = p + dir * neighbor_step[axis];
                if (rank[q] > r) continue;  // not yet in the filtration

                const int root_q = uf.find(q);
                const int root_p = uf.find(p);
                if (root_q == root_p) continue;

                // Elder rule: the component with the later birth dies here.
                int elder = root_q, younger = root_p;
                if (birth_value[root_p] < birth_value[root_q] ||
                    (birth_value[root_p] == birth_value[root_q] &&
                     birth_rank[root_p] < birth_rank[root_q])) {
                    elder = root_p;
                    younger = root_q;
                }
                if (birth_value[younger] < v.data[p])
                    diagram.points.emplace_back(birth_value[younger], v.data[p]);
                uf.parent[younger] = elder;
            }
        }
    }

    // Essential component, closed at the global maximum.
    diagram.points.emplace_back(v.data[order[0]], v.data[order[n - 1]]);
    std::sort(diagram.points.begin(), diagram.points.end());
    return diagram;
}

namespace {

double inf_dist(const std::pair<double, double>& a, const std::pair<double, double>& b) {
    return std::max(std::abs(a.first - b.first), std::abs(a.second - b.second));
}

double diag_dist(const std::pair<double, double>& a) { return (a.second - a.first) / 2.0; }

// Hopcroft-Karp maximum matching on a bipartite graph given as adjacency of
// the left side. Returns the matching size.
class HopcroftKarp {
public:
    HopcroftKarp(int n_left, int n_right, const std::vector<std::vector<int>>& adj)
        : n_left_(n_left), adj_(adj), match_left_(n_left, -1), match_right_(n_right, -1),
          dist_(n_left, 0) {}

    int solve() {
        int matching = 0;
        while (bfs()) {
            for (int u = 0; u < n_left_; ++u)
                if (match_left_[u] < 0 && dfs(u)) ++matching;
        }
        return matching;
    }

private:
    static constexpr int kInf = 1 << 30;

    bool bfs() {
        std::vector<int> queue;
        queue.reserve(n_left_);
        for (int u = 0; u < n_left_; ++u) {
            if (match_left_[u] < 0) {
                dist_[u] = 0;
                queue.push_back(u);
            } else {
                dist_[u] = kInf;
            }
        }
        bool reachable_free = false;
        for (std::size_t head = 0; head < queue.size(); ++head) {
            const int u = queue[head];
            for (int w : adj_[u]) {
                const int next = match_right_[w];
                if (next < 0) {
                    reachable_free = true;
                } else if (dist_[next] == kInf) {
                    dist_[next] = dist_[u] + 1;
                    queue.push_back(next);
                }
            }
        }
        return reachable_free;
    }

    bool dfs(int u) {
        for (int w : adj_[u]) {
            const int next = match_right_[w];
            if (next < 0 || (dist_[next] == dist_[u] + 1 && dfs(next))) {
                match_left_[u] = w;
                match_right_[w] = u;
                return true;
            }
        }
        dist_[u] = kInf;
        return false;
    }

    int n_left_;
    const std::vector<std::vector<int>>& adj_;
    std::vector<int> match_left_, match_right_;
    std::vector<int> dist_;
};

// Does a matching within radius r exist that covers every point of `must`
// (those with diagonal distance > r) against the full other side?
bool saturates(const std::vector<std::pair<double, double>>& from,
               const std::vector<std::pair<double, double>>& to, double r) {
    std::vector<int> must;
    for (int i = 0; i < static_cast<int>(from.size()); ++i)
        if (diag_dist(from[i]) > r) must.push_back(i);
    if (must.empty()) return true;
    if (to.empty()) return false;

    std::vector<std::vector<int>> adj(must.size());
    for (std::size_t k = 0; k < must.size(); ++k) {
        const auto& p = from[must[k]];
        for (int j = 0; j < static_cast<int>(to.size()); ++j)
            if (inf_dist(p, to[j]) <= r) adj[k].push_back(j);
        if (adj[k].empty()) return false;
    }
    HopcroftKarp hk(static_cast<int>(must.size()), static_cast<int>(to.size()), adj);
    return hk.solve() == static_cast<int>(must.size());
}

// W_inf <= r iff points that cannot reach the diagonal within r can be
// matched within r, simultaneously on both sides. By the Mendelsohn-Dulmage
// theorem a matching saturating each side separately can be combined into one
// saturating both, so two one-sided tests suffice.
bool feasible(const std::vector<std::pair<double, double>>& a,
              const std::vector<std::pair<double, double>>& b, double r) {
    return saturates(a, b, r) && saturates(b, a, r);
}

}  // namespace

double bottleneck_distance(const PersistenceDiagram& d1, const PersistenceDiagram& d2) {
    if (d1.dimension != d2.dimension)
        throw Error("bottleneck_distance: homology dimensions differ");
    const auto& a = d1.points;
    const auto& b = d2.points;
    if (a.empty() && b.empty()) return 0.0;

    std::vector<double> candidates;
    candidates.reserve(a.size() * b.size() + a.size() + b.size() + 1);
    candidates.push_back(0.0);
    for (const auto& p : a) candidates.push_back(diag_dist(p));
    for (const auto& q : b) candidates.push_back(diag_dist(q));
    for (const auto& p : a)
        for (const auto& q : b) candidates.push_back(inf_dist(p, q));
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

    // The optimum is attained at a candidate value; binary search for the
    // smallest feasible one.
    std::size_t lo = 0, hi = candidates.size() - 1;
    if (feasible(a, b, candidates[lo])) return candidates[lo];
    while (hi - lo > 1) {
        const std::size_t mid = lo + (hi - lo) / 2;
        if (feasible(a, b, candidates[mid]))
            hi = mid;
        else
            lo = mid;
    }
    return candidates[hi];
}

Volume average_pool2(const Volume& v) {
    const int nx = (v.dims[0] + 1) / 2, ny = (v.dims[1] + 1) / 2, nz = (v.dims[2] + 1) / 2;
    Volume out(nx, ny, nz);
    out.spacing = {v.spacing[0] * 2, v.spacing[1] * 2, v.spacing[2] * 2};
    out.origin = v.origin;
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) {
                double sum = 0.0;
                int count = 0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const int sx = 2 * x + dx, sy = 2 * y + dy, sz = 2 * z + dz;
                            if (sx < v.dims[0] && sy < v.dims[1] && sz < v.dims[2]) {
                                sum += v.at(sx, sy, sz);
                                ++count;
                            }
                        }
                out.at(x, y, z) = sum / count;
            }
    return out;
}

PersistenceDiagram persistence_for_quality(const Volume& v, bool* downsampled) {
    constexpr std::size_t kMaxVoxels = 64ull * 64ull * 64ull;
    Volume work = v;
    bool shrunk = false;
    while (work.size() > kMaxVoxels) {
        work = average_pool2(work);
        shrunk = true;
    }
    if (downsampled) *downsampled = shrunk;
    return sublevel_persistence_h0(work);
}

double q_topo(const Volume& fu, const Volume& bl, const QualityConfig& cfg, bool* downsampled) {
    if (!(cfg.tau > 0.0)) throw Error("q_topo: tau must be positive");
    bool d1 = false, d2 = false;
    const PersistenceDiagram diagram_fu = persistence_for_quality(fu, &d1);
    const PersistenceDiagram diagram_bl = persistence_for_quality(bl, &d2);
    if (downsampled) *downsampled = d1 || d2;
    const double w = bottleneck_distance(diagram_fu, diagram_bl);
    // Floor keeps the value strictly positive even when tau*w underflows exp.
    return std::max(std::exp(-cfg.tau * w), 1e-300);
}

void write_diagram_csv(const PersistenceDiagram& d, const std::string& path) {
    std::string text = "birth,death\n";
    char line[64];
    for (const auto& p : d.points) {
        std::snprintf(line, sizeof(line), "%.12g,%.12g\n", p.first, p.second);
        text += line;
    }
    atomic_write_text(path, text);
}

}  // namespace topogate
