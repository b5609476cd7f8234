#pragma once

#include <string>
#include <utility>
#include <vector>

#include "topogate/volume.hpp"

namespace topogate {

/// H0 persistence diagram of a sublevel filtration: a multiset of
/// (birth, death) pairs with death >= birth. The essential component is
/// closed at the global maximum, so all values are finite.
struct PersistenceDiagram {
    std::vector<std::pair<double, double>> points;
    int dimension = 0;

    std::size_t size() const { return points.size(); }
    double total_persistence() const;
    double max_persistence() const;
};

/// Sublevel-set H0 persistence under 6-connectivity. Voxels are processed in
/// increasing (value, linear index) order and merged with union-find; at each
/// merge the younger component dies (elder rule). Zero-persistence merge
/// pairs are not emitted; the essential component is recorded as
/// (global min, global max).
PersistenceDiagram sublevel_persistence_h0(const Volume& v);

/// Bottleneck distance between two diagrams: the minimum over partial
/// matchings (unmatched points pair to the diagonal) of the maximum
/// infinity-norm displacement. Exact: binary search over the candidate set
/// {cross distances} u {(death-birth)/2} with bipartite-matching feasibility.
double bottleneck_distance(const PersistenceDiagram& d1, const PersistenceDiagram& d2);

struct QualityConfig;  // quality.hpp

/// exp(-tau * W_inf(D(fu), D(bl))). Volumes larger than 64^3 voxels are
/// average-pooled by factor 2 until they fit, recorded via the out flag.
double q_topo(const Volume& fu, const Volume& bl, const QualityConfig& cfg,
              bool* downsampled = nullptr);

/// Factor-2 average pooling (ceil dims), used to bound persistence runtime.
Volume average_pool2(const Volume& v);

/// Diagram used for q_topo after the size policy above.
PersistenceDiagram persistence_for_quality(const Volume& v, bool* downsampled = nullptr);

void write_diagram_csv(const PersistenceDiagram& d, const std::string& path);

}  // namespace topogate
