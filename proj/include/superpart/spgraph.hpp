#pragma once

#include "superpart/core.hpp"
#include "superpart/hierarchy.hpp"

namespace superpart {

// Same-level superpoint adjacency. Both orientations of every edge are
// stored; `features` rows follow the source->destination orientation.
// `anchors` keeps the gap anchor pair (source point, destination point) per
// edge for interface computation; it is not serialized.
struct SuperpointGraph {
  Index level{1};
  EdgeList edges;  // E×2 oriented
  Mat features;    // E×18 once computed, else 0×0
  Vec gaps;        // E
  Mat anchors;     // E×6, else 0×0
  Index edge_count() const { return static_cast<Index>(edges.rows()); }
};

struct GapResult {
  double distance{0.0};
  Vec3 anchor_p = Vec3::Zero();
  Vec3 anchor_q = Vec3::Zero();
};

// Alternating nearest-point iteration from the two centroids; the returned
// distance is an upper bound on the exact minimum pair distance and is
// non-increasing from the first completed step on. Ties toward the smaller
// point index.
GapResult approximate_gap(const MatX3& points_p, const MatX3& points_q, int num_steps);

struct SuperpointStats {
  Vec3 centroid = Vec3::Zero();
  Vec3 s = Vec3::Zero();        // sqrt of PCA eigenvalues, descending
  Vec3 normal = Vec3::UnitZ();  // smallest-eigenvalue eigenvector
  Index count{0};
};

SuperpointStats superpoint_stats(const MatX3& member_positions);

// Interface descriptor for orientation p->q: up to k_interface points per
// side nearest to the opposing anchor within `window`, rank-matched after
// sorting along the selections' joint principal component. Returns
// [mean offset (3), mean offset length (1), per-axis offset std (3)].
Eigen::Matrix<double, 7, 1> interface_features(const MatX3& points_p, const MatX3& points_q,
                                               const Vec3& anchor_p, const Vec3& anchor_q,
                                               Index k_interface, double window);

// [length, surface, volume, count] ratios p/q with sqrt-eigenvalue extents
// (length = s1, surface = s1·s2, volume = s1·s2·s3); denominators floored
// at 1e-6.
Eigen::Matrix<double, 4, 1> ratio_features(const SuperpointStats& stats_p,
                                           const SuperpointStats& stats_q);

// [|cos(n_p,n_q)|, |cos(n_p,dir)|, |cos(n_q,dir)|, centroid distance,
// unit centroid offset (3)] with dir the mean interface offset; zero offset
// zeroes the direction cosines and the unit offset.
Eigen::Matrix<double, 7, 1> pose_features(const SuperpointStats& stats_p,
                                          const SuperpointStats& stats_q,
                                          const Vec3& mean_offset);

struct SpgraphConfig {
  double eps{0.1};        // gap threshold for this level, meters
  int num_steps{3};
  Index k_interface{32};
  double voxel{0.0};      // interface window = gap + 2·voxel
};

// Candidate pairs from a centroid radius search bounded by
// r_p + r_q + eps, kept when the approximate gap is <= eps. Output is
// symmetric (both orientations), edges sorted, gaps and anchors filled,
// features left empty.
SuperpointGraph build_superpoint_graph(const HierarchicalPartition& hp, Index level,
                                       const MatX3& positions, const SpgraphConfig& config);

// Fill graph.features with the 18-column table
// [interface(7) | ratio(4) | pose(7)] per oriented edge.
void compute_adjacency_features(const HierarchicalPartition& hp, const MatX3& positions,
                                SuperpointGraph& graph, const SpgraphConfig& config);

}  // namespace superpart
