#include "superpart/hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace superpart {

Index HierarchicalPartition::size_at(Index level) const {
  require(level >= 0 && level <= level_count(), "level out of range");
  if (level == 0) return point_count;
  return levels[static_cast<std::size_t>(level - 1)].component_count();
}

IndexVec HierarchicalPartition::compose_to(Index level) const {
  require(level >= 0 && level <= level_count(), "level out of range");
  IndexVec map(point_count);
  for (Index p = 0; p < point_count; ++p) map[p] = p;
  for (Index i = 0; i < level; ++i) {
    const auto& parent = levels[static_cast<std::size_t>(i)].super_index;
    for (Index p = 0; p < point_count; ++p) map[p] = parent[map[p]];
  }
  return map;
}

WeightedGraph reduce_graph(const WeightedGraph& graph, const Partition& partition) {
  require(static_cast<Index>(partition.super_index.size()) == graph.node_count,
          "partition does not cover the graph nodes");
  std::map<std::pair<Index, Index>, double> crossing;
  for (Index e = 0; e < graph.edge_count(); ++e) {
    Index u = partition.super_index[graph.edges(e, 0)];
    Index v = partition.super_index[graph.edges(e, 1)];
    if (u == v) continue;
    if (u > v) std::swap(u, v);
    crossing[{u, v}] += graph.weights[e];
  }
  WeightedGraph reduced;
  reduced.node_count = partition.component_count();
  reduced.edges.resize(static_cast<Index>(crossing.size()), 2);
  reduced.weights.resize(static_cast<Index>(crossing.size()));
  Index e = 0;
  for (const auto& [pair, weight] : crossing) {
    reduced.edges(e, 0) = pair.first;
    reduced.edges(e, 1) = pair.second;
    reduced.weights[e] = weight;
    ++e;
  }
  return reduced;
}

HierarchicalPartition build_hierarchy(const Mat& f, const WeightedGraph& graph,
                                      const MatX3& positions, const std::vector<double>& lambdas,
                                      const HierarchyConfig& config) {
  const Index n = graph.node_count;
  require(static_cast<Index>(f.rows()) == n, "graph/f node count mismatch");
  require(static_cast<Index>(positions.rows()) == n, "graph/positions node count mismatch");
  require(!lambdas.empty(), "lambda list must be nonempty");
  for (double lambda : lambdas) require(lambda > 0.0, "lambda values must be > 0");

  HierarchicalPartition hp;
  hp.point_count = n;

  Mat cur_f = f;
  WeightedGraph cur_graph = graph;
  Vec cur_counts = Vec::Ones(n);
  IndexVec point_to_cur(n);
  for (Index p = 0; p < n; ++p) point_to_cur[p] = p;

  for (double lambda : lambdas) {
    SolverConfig solver = config.solver;
    solver.lambda = lambda;
    const Vec weights = config.weighted_fidelity ? cur_counts : Vec();
    const Partition partition = minimize_l0(cur_f, cur_graph, solver, weights);
    const Index s = partition.component_count();
    const Index d = static_cast<Index>(cur_f.cols());

    HierarchyLevel level;
    level.super_index = partition.super_index;
    level.point_counts = IndexVec::Zero(s);
    level.mean_features = Mat::Zero(s, d);
    level.centroids = MatX3::Zero(s, 3);
    level.radii = Vec::Zero(s);

    // Point-count-weighted child aggregation keeps the level statistics
    // equal to plain means over the contained level-0 points.
    for (Index c = 0; c < cur_graph.node_count; ++c) {
      const Index parent = partition.super_index[c];
      const double mass = cur_counts[c];
      level.point_counts[parent] += static_cast<Index>(mass);
      level.mean_features.row(parent) += mass * cur_f.row(c);
    }
    for (Index c = 0; c < s; ++c)
      level.mean_features.row(c) /= static_cast<double>(level.point_counts[c]);

    for (Index p = 0; p < n; ++p) point_to_cur[p] = partition.super_index[point_to_cur[p]];
    for (Index p = 0; p < n; ++p) level.centroids.row(point_to_cur[p]) += positions.row(p);
    for (Index c = 0; c < s; ++c)
      level.centroids.row(c) /= static_cast<double>(level.point_counts[c]);
    for (Index p = 0; p < n; ++p) {
      const Index c = point_to_cur[p];
      level.radii[c] = std::max(level.radii[c],
                                (positions.row(p) - level.centroids.row(c)).norm());
    }

    cur_graph = reduce_graph(cur_graph, partition);
    cur_f = level.mean_features;
    cur_counts = level.point_counts.cast<double>();
    hp.levels.push_back(std::move(level));
  }
  return hp;
}

TuneResult tune_lambda(const Mat& f, const WeightedGraph& graph, const MatX3& positions,
                       double target_ratio, std::pair<double, double> bounds, double tol,
                       const HierarchyConfig& config) {
  (void)positions;
  require(target_ratio > 1.0, "target_ratio must be > 1");
  require(bounds.first > 0.0 && bounds.first < bounds.second, "need 0 < lambda_lo < lambda_hi");
  require(tol > 0.0, "tol must be > 0");

  const Index n = graph.node_count;
  const double target = static_cast<double>(n) / target_ratio;

  auto component_count = [&](double lambda) {
    SolverConfig solver = config.solver;
    solver.lambda = lambda;
    const Vec weights = config.weighted_fidelity ? Vec::Ones(n) : Vec();
    return minimize_l0(f, graph, solver, weights).component_count();
  };

  TuneResult result;
  auto consider = [&](double lambda, Index count) {
    const double miss = std::abs(static_cast<double>(count) - target);
    const double best_miss =
        result.steps == 0
            ? std::numeric_limits<double>::infinity()
            : std::abs(static_cast<double>(result.component_count) - target);
    if (miss < best_miss) {
      result.lambda = lambda;
      result.component_count = count;
      result.achieved_ratio = static_cast<double>(n) / static_cast<double>(count);
    }
    ++result.steps;
    return miss <= tol * target;
  };

  double lo = bounds.first, hi = bounds.second;
  const Index count_lo = component_count(lo);
  const Index count_hi = component_count(hi);
  // Coarseness grows with lambda, so the low end should sit above the
  // target count and the high end below it.
  result.bracketed = static_cast<double>(count_lo) >= target &&
                     static_cast<double>(count_hi) <= target;
  if (consider(lo, count_lo)) return result;
  if (consider(hi, count_hi)) return result;

  for (int step = 0; step < 20; ++step) {
    const double mid = std::sqrt(lo * hi);
    const Index count_mid = component_count(mid);
    if (consider(mid, count_mid)) return result;
    if (static_cast<double>(count_mid) > target)
      lo = mid;  // too fine, push lambda up
    else
      hi = mid;
  }
  return result;
}

}  // namespace superpart
