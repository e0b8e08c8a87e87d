#pragma once

#include "superpart/cloud_io.hpp"
#include "superpart/core.hpp"
#include "superpart/cut_pursuit.hpp"
#include "superpart/features.hpp"
#include "superpart/hierarchy.hpp"

#include <string>
#include <vector>

namespace superpart {

struct ConfusionMatrix {
  Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> counts;  // truth x pred
  Index total() const { return counts.sum(); }
};

struct MiouReport {
  ConfusionMatrix confusion;
  Vec per_class_iou;                // indexed by class id; 0 where undefined
  std::vector<bool> class_present;  // class appears in truth or prediction
  double miou{0.0};
  double oa{0.0};
  Index evaluated{0};  // points with labeled truth
  bool defined{false};
};

// Rows with truth -1 are excluded. IoU = TP / (TP + FP + FN); classes absent
// from both truth and prediction do not enter the mean. OA = trace / total.
MiouReport confusion_and_miou(const Eigen::VectorXi& pred, const Eigen::VectorXi& truth);

struct OracleResult {
  Eigen::VectorXi component_class;  // majority label per component, -1 if fully unlabeled
  Eigen::VectorXi point_pred;       // inherited per level-0 point
};

// Majority vote over each component's labeled member points, ties to the
// smallest class id.
OracleResult oracle_for_components(const IndexVec& component_of_point, Index component_count,
                                   const Eigen::VectorXi& labels);

OracleResult oracle_assign(const HierarchicalPartition& hp, const Eigen::VectorXi& labels,
                           Index level);

enum class SweepMode { kPartition, kVoxel };

struct SweepConfig {
  FeatureConfig features;  // signal for partition mode
  SolverConfig solver;     // lambda overridden by the grid value
  Index k_graph{10};       // unit-weight adjacency for partition mode
};

struct SweepRow {
  double grid_param{0.0};
  Index component_count{0};
  double oracle_miou{0.0};
  double oracle_oa{0.0};
};

// Partition mode groups points by a one-level cut-pursuit partition at each
// lambda in the grid; voxel mode groups them by cells of each voxel size.
// Every row reports the oracle purity of that grouping.
std::vector<SweepRow> purity_sweep(const PointCloud& cloud, const std::vector<double>& grid,
                                   SweepMode mode, const SweepConfig& config = {});

// Header plus one line per row, reals with six decimals.
std::string sweep_to_csv(const std::vector<SweepRow>& rows);

}  // namespace superpart
