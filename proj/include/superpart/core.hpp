#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace superpart {

using Index = std::int64_t;

// Row-major double matrices everywhere; feature tables and the numeric
// kernel share the same carrier type.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatX3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using IndexVec = Eigen::Matrix<Index, Eigen::Dynamic, 1>;
using EdgeList = Eigen::Matrix<Index, Eigen::Dynamic, 2, Eigen::RowMajor>;

/// Point cloud with positions in meters, optional radiometry in [0,1]
/// (R channels: 0 none, 1 intensity, 3 RGB) and optional integer labels
/// (-1 = unlabeled).
struct PointCloud {
  MatX3 positions;
  Mat radiometry;              // N x R, R in {0,1,3}
  Eigen::VectorXi labels;      // empty when absent

  Index size() const { return positions.rows(); }
  Index radiometry_dim() const { return radiometry.rows() == 0 ? 0 : radiometry.cols(); }
  bool has_labels() const { return labels.size() == positions.rows() && labels.size() > 0; }
};

/// Undirected weighted graph; each edge stored once with u < v.
struct WeightedGraph {
  Index node_count{0};
  EdgeList edges;   // E x 2, canonical u < v, no duplicates, no self-loops
  Vec weights;      // E, nonnegative

  Index edge_count() const { return edges.rows(); }
};

/// Compressed adjacency view of a WeightedGraph (both directions).
struct GraphCsr {
  std::vector<Index> offsets;    // node_count + 1
  std::vector<Index> neighbors;  // 2E
  std::vector<Index> edge_ids;   // 2E, index into graph.edges rows
  std::vector<double> weights;   // 2E

  Index degree(Index u) const { return offsets[u + 1] - offsets[u]; }
};

GraphCsr build_csr(const WeightedGraph& graph);

/// Connected components of a WeightedGraph; returns component id per node
/// (ids contiguous, ordered by smallest member node) and component count.
std::pair<std::vector<Index>, Index> connected_components(const WeightedGraph& graph);

inline void require(bool condition, const std::string& message) {
  if (!condition) throw std::invalid_argument(message);
}

}  // namespace superpart
