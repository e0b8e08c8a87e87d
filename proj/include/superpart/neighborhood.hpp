#pragma once

#include "superpart/core.hpp"

#include <vector>

namespace superpart {

// Exact nearest-neighbor structure over a fixed set of 3D points. Median
// splits along the widest axis; queries compare (squared distance, index)
// pairs lexicographically so results are unique even with duplicate points.
class KdTree {
 public:
  explicit KdTree(const MatX3& points, Index leaf_size = 16);

  // Indices of the k nearest points to `query`, ordered by (dist², index)
  // ascending. `exclude` is skipped (pass the query's own index for
  // self-excluding searches, or -1 to keep everything).
  std::vector<Index> knn(const Vec3& query, Index k, Index exclude = -1) const;

  // All indices with squared distance ≤ radius², sorted ascending by index.
  std::vector<Index> radius_query(const Vec3& center, double radius) const;

  Index size() const { return static_cast<Index>(points_.rows()); }

 private:
  struct Node {
    Index begin{0}, end{0};   // range into order_
    int axis{-1};             // -1 marks a leaf
    double split{0.0};
    Index left{-1}, right{-1};
    Vec3 box_min, box_max;
  };

  Index build(Index begin, Index end);

  MatX3 points_;
  Index leaf_size_;
  std::vector<Index> order_;
  std::vector<Node> nodes_;
};

// Indices of the k nearest neighbors of every point, excluding the point
// itself. Row p holds the neighbors of p ordered by (dist², index).
// Throws std::invalid_argument when k <= 0 or k >= number of points.
Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> knn_indices(
    const MatX3& points, Index k);

// Symmetrized k-nearest-neighbor graph: edge (u,v) present when u is in
// v's neighbor list or v is in u's. Edges stored once with u < v, unit
// weights.
WeightedGraph build_knn_graph(const MatX3& points, Index k);

// For each query row, the indices of all points with distance <= radius,
// sorted ascending by index. Throws when radius <= 0.
std::vector<std::vector<Index>> neighbors_within(const MatX3& points, const MatX3& queries,
                                                 double radius);

}  // namespace superpart
