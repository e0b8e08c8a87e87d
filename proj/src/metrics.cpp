#include "superpart/metrics.hpp"

#include "superpart/neighborhood.hpp"

#include <algorithm>
#include <cstdio>

namespace superpart {

MiouReport confusion_and_miou(const Eigen::VectorXi& pred, const Eigen::VectorXi& truth) {
  require(pred.size() == truth.size(), "pred and truth lengths differ");

  MiouReport report;
  int n_classes = 0;
  for (Index i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0) continue;
    require(pred[i] >= 0, "prediction missing for a labeled point");
    ++report.evaluated;
    n_classes = std::max(n_classes, std::max(truth[i], pred[i]) + 1);
  }
  if (report.evaluated == 0) return report;

  report.confusion.counts.setZero(n_classes, n_classes);
  for (Index i = 0; i < truth.size(); ++i)
    if (truth[i] >= 0) ++report.confusion.counts(truth[i], pred[i]);

  report.per_class_iou = Vec::Zero(n_classes);
  report.class_present.assign(static_cast<std::size_t>(n_classes), false);
  double iou_sum = 0.0;
  Index present = 0;
  for (int k = 0; k < n_classes; ++k) {
    const Index tp = report.confusion.counts(k, k);
    const Index fn = report.confusion.counts.row(k).sum() - tp;
    const Index fp = report.confusion.counts.col(k).sum() - tp;
    if (tp + fn + fp == 0) continue;
    report.class_present[static_cast<std::size_t>(k)] = true;
    report.per_class_iou[k] =
        static_cast<double>(tp) / static_cast<double>(tp + fn + fp);
    iou_sum += report.per_class_iou[k];
    ++present;
  }
  report.miou = iou_sum / static_cast<double>(present);
  report.oa = static_cast<double>(report.confusion.counts.trace()) /
              static_cast<double>(report.evaluated);
  report.defined = true;
  return report;
}

OracleResult oracle_for_components(const IndexVec& component_of_point, Index component_count,
                                   const Eigen::VectorXi& labels) {
  require(component_of_point.size() == labels.size(),
          "component map and labels lengths differ");
  int n_classes = 0;
  for (Index p = 0; p < labels.size(); ++p) {
    require(labels[p] >= -1, "labels must be >= -1");
    n_classes = std::max(n_classes, labels[p] + 1);
  }

  Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> votes =
      Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Zero(
          component_count, std::max(n_classes, 1));
  for (Index p = 0; p < labels.size(); ++p) {
    const Index c = component_of_point[p];
    require(c >= 0 && c < component_count, "component id out of range");
    if (labels[p] >= 0) ++votes(c, labels[p]);
  }

  OracleResult result;
  result.component_class.setConstant(component_count, -1);
  for (Index c = 0; c < component_count; ++c) {
    Index best_count = 0;
    for (int k = 0; k < n_classes; ++k) {
      if (votes(c, k) > best_count) {
        best_count = votes(c, k);
        result.component_class[c] = k;
      }
    }
  }
  result.point_pred.resize(labels.size());
  for (Index p = 0; p < labels.size(); ++p)
    result.point_pred[p] = result.component_class[component_of_point[p]];
  return result;
}

OracleResult oracle_assign(const HierarchicalPartition& hp, const Eigen::VectorXi& labels,
                           Index level) {
  require(level >= 1 && level <= hp.level_count(), "level out of range");
  require(labels.size() == hp.point_count, "labels length mismatch");
  return oracle_for_components(hp.compose_to(level), hp.size_at(level), labels);
}

std::vector<SweepRow> purity_sweep(const PointCloud& cloud, const std::vector<double>& grid,
                                   SweepMode mode, const SweepConfig& config) {
  require(cloud.has_labels(), "purity sweep needs a labeled cloud");
  require(!grid.empty(), "empty sweep grid");

  std::vector<SweepRow> rows;
  rows.reserve(grid.size());

  if (mode == SweepMode::kPartition) {
    const Mat signal = assemble_point_features(cloud, config.features).concatenated();
    const WeightedGraph graph = build_knn_graph(cloud.positions, config.k_graph);
    for (double lambda : grid) {
      SolverConfig solver = config.solver;
      solver.lambda = lambda;
      const Partition partition = minimize_l0(signal, graph, solver);
      const OracleResult oracle =
          oracle_for_components(partition.super_index, partition.component_count(), cloud.labels);
      const MiouReport report = confusion_and_miou(oracle.point_pred, cloud.labels);
      rows.push_back({lambda, partition.component_count(), report.miou, report.oa});
    }
  } else {
    for (double voxel : grid) {
      require(voxel > 0.0, "voxel size must be > 0");
      const VoxelSubsampleResult sub = voxel_subsample(cloud, voxel);
      IndexVec cell_of_point(cloud.size());
      for (std::size_t m = 0; m < sub.groups.size(); ++m)
        for (Index p : sub.groups[m]) cell_of_point[p] = static_cast<Index>(m);
      const OracleResult oracle = oracle_for_components(
          cell_of_point, static_cast<Index>(sub.groups.size()), cloud.labels);
      const MiouReport report = confusion_and_miou(oracle.point_pred, cloud.labels);
      rows.push_back({voxel, static_cast<Index>(sub.groups.size()), report.miou, report.oa});
    }
  }
  return rows;
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
  std::string csv = "grid_param,component_count,oracle_miou,oracle_oa\n";
  char line[128];
  for (const SweepRow& row : rows) {
    std::snprintf(line, sizeof(line), "%.6f,%lld,%.6f,%.6f\n", row.grid_param,
                  static_cast<long long>(row.component_count), row.oracle_miou, row.oracle_oa);
    csv += line;
  }
  return csv;
}

}  // namespace superpart
