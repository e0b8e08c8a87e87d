#include "superpart/spgraph.hpp"

#include "superpart/neighborhood.hpp"
#include "superpart/parallel.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <unordered_map>
#include <utility>
#include <vector>

namespace superpart {

namespace {

Index nearest_in(const MatX3& points, const Vec3& query) {
  Index best = 0;
  double best_d2 = (points.row(0).transpose() - query).squaredNorm();
  for (Index i = 1; i < static_cast<Index>(points.rows()); ++i) {
    const double d2 = (points.row(i).transpose() - query).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = i;
    }
  }
  return best;
}

struct MemberView {
  const MatX3& points;  // gathered member positions, ascending level-0 index
  const KdTree* tree;   // nullptr for small superpoints
};

Index nearest_member(const MemberView& view, const Vec3& query) {
  if (view.tree) return view.tree->knn(query, 1)[0];
  return nearest_in(view.points, query);
}

GapResult gap_between(const MemberView& p, const MemberView& q, int num_steps) {
  GapResult result;
  Vec3 c1 = p.points.colwise().mean().transpose();
  Vec3 c2 = q.points.colwise().mean().transpose();
  double prev = std::numeric_limits<double>::infinity();
  for (int step = 0; step < num_steps; ++step) {
    c2 = q.points.row(nearest_member(q, c1)).transpose();
    c1 = p.points.row(nearest_member(p, c2)).transpose();
    const double dist = (c1 - c2).norm();
    // Each half-update minimizes over a set containing the previous anchor,
    // so from the first completed step on the distance cannot grow.
    assert(dist <= prev);
    prev = dist;
  }
  result.distance = prev;
  result.anchor_p = c1;
  result.anchor_q = c2;
  return result;
}

// Up to k member points nearest to `anchor` within `window`, ordered by
// (distance, index).
std::vector<Index> select_interface(const MatX3& points, const Vec3& anchor, Index k,
                                    double window) {
  std::vector<std::pair<double, Index>> within;
  for (Index i = 0; i < static_cast<Index>(points.rows()); ++i) {
    const double dist = (points.row(i).transpose() - anchor).norm();
    if (dist <= window) within.emplace_back(dist, i);
  }
  std::sort(within.begin(), within.end());
  if (static_cast<Index>(within.size()) > k) within.resize(static_cast<std::size_t>(k));
  std::vector<Index> selected(within.size());
  for (std::size_t i = 0; i < within.size(); ++i) selected[i] = within[i].second;
  return selected;
}

}  // namespace

GapResult approximate_gap(const MatX3& points_p, const MatX3& points_q, int num_steps) {
  require(points_p.rows() > 0 && points_q.rows() > 0, "point sets must be nonempty");
  require(num_steps >= 1, "num_steps must be >= 1");
  const MemberView p{points_p, nullptr};
  const MemberView q{points_q, nullptr};
  return gap_between(p, q, num_steps);
}

SuperpointStats superpoint_stats(const MatX3& member_positions) {
  const Index n = static_cast<Index>(member_positions.rows());
  require(n > 0, "superpoint must be nonempty");
  SuperpointStats stats;
  stats.count = n;
  stats.centroid = member_positions.colwise().mean().transpose();

  Mat3 cov = Mat3::Zero();
  for (Index i = 0; i < n; ++i) {
    const Vec3 d = member_positions.row(i).transpose() - stats.centroid;
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(n);
  if (cov.cwiseAbs().maxCoeff() == 0.0) {
    stats.s.setZero();
    stats.normal = Vec3::UnitZ();
    return stats;
  }
  Eigen::SelfAdjointEigenSolver<Mat3> solver(cov);
  for (int i = 0; i < 3; ++i)
    stats.s[i] = std::sqrt(std::max(0.0, solver.eigenvalues()[2 - i]));
  stats.normal = solver.eigenvectors().col(0);  // smallest eigenvalue
  return stats;
}

Eigen::Matrix<double, 7, 1> interface_features(const MatX3& points_p, const MatX3& points_q,
                                               const Vec3& anchor_p, const Vec3& anchor_q,
                                               Index k_interface, double window) {
  require(k_interface >= 1, "k_interface must be >= 1");
  require(window > 0.0, "window must be > 0");
  // Each side looks toward the opposing anchor.
  std::vector<Index> sel_p = select_interface(points_p, anchor_q, k_interface, window);
  std::vector<Index> sel_q = select_interface(points_q, anchor_p, k_interface, window);
  require(!sel_p.empty() && !sel_q.empty(), "interface selection is empty");
  const std::size_t count = std::min(sel_p.size(), sel_q.size());
  sel_p.resize(count);
  sel_q.resize(count);

  // Joint principal component of both selections.
  Vec3 mean = Vec3::Zero();
  for (Index i : sel_p) mean += points_p.row(i).transpose();
  for (Index i : sel_q) mean += points_q.row(i).transpose();
  mean /= static_cast<double>(2 * count);
  Mat3 cov = Mat3::Zero();
  for (Index i : sel_p) {
    const Vec3 d = points_p.row(i).transpose() - mean;
    cov += d * d.transpose();
  }
  for (Index i : sel_q) {
    const Vec3 d = points_q.row(i).transpose() - mean;
    cov += d * d.transpose();
  }
  Vec3 axis = Vec3::UnitX();
  if (cov.cwiseAbs().maxCoeff() > 0.0) {
    Eigen::SelfAdjointEigenSolver<Mat3> solver(cov);
    axis = solver.eigenvectors().col(2);
  }

  // Rank matching along the axis. A global sign flip of the axis reverses
  // both orders at once, so the matched pair set does not depend on the
  // eigenvector sign.
  auto by_projection = [&](const MatX3& points, std::vector<Index>& sel) {
    std::sort(sel.begin(), sel.end(), [&](Index a, Index b) {
      const double pa = points.row(a).transpose().dot(axis);
      const double pb = points.row(b).transpose().dot(axis);
      if (pa != pb) return pa < pb;
      return a < b;
    });
  };
  by_projection(points_p, sel_p);
  by_projection(points_q, sel_q);

  Mat offsets(static_cast<Index>(count), 3);
  for (std::size_t i = 0; i < count; ++i)
    offsets.row(static_cast<Index>(i)) = points_q.row(sel_q[i]) - points_p.row(sel_p[i]);

  Eigen::Matrix<double, 7, 1> features;
  const Vec3 mean_offset = offsets.colwise().mean().transpose();
  features.segment<3>(0) = mean_offset;
  features[3] = offsets.rowwise().norm().mean();
  for (int a = 0; a < 3; ++a) {
    const double var = (offsets.col(a).array() - mean_offset[a]).square().mean();
    features[4 + a] = std::sqrt(std::max(0.0, var));
  }
  return features;
}

Eigen::Matrix<double, 4, 1> ratio_features(const SuperpointStats& stats_p,
                                           const SuperpointStats& stats_q) {
  constexpr double kFloor = 1e-6;
  const double len_p = stats_p.s[0], len_q = stats_q.s[0];
  const double surf_p = stats_p.s[0] * stats_p.s[1], surf_q = stats_q.s[0] * stats_q.s[1];
  const double vol_p = surf_p * stats_p.s[2], vol_q = surf_q * stats_q.s[2];
  Eigen::Matrix<double, 4, 1> features;
  features[0] = len_p / std::max(len_q, kFloor);
  features[1] = surf_p / std::max(surf_q, kFloor);
  features[2] = vol_p / std::max(vol_q, kFloor);
  features[3] = static_cast<double>(stats_p.count) / static_cast<double>(stats_q.count);
  return features;
}

Eigen::Matrix<double, 7, 1> pose_features(const SuperpointStats& stats_p,
                                          const SuperpointStats& stats_q,
                                          const Vec3& mean_offset) {
  Eigen::Matrix<double, 7, 1> features;
  features[0] = std::abs(stats_p.normal.dot(stats_q.normal));
  const double offset_norm = mean_offset.norm();
  if (offset_norm > 0.0) {
    const Vec3 dir = mean_offset / offset_norm;
    features[1] = std::abs(stats_p.normal.dot(dir));
    features[2] = std::abs(stats_q.normal.dot(dir));
  } else {
    features[1] = features[2] = 0.0;
  }
  const Vec3 centroid_offset = stats_q.centroid - stats_p.centroid;
  const double centroid_dist = centroid_offset.norm();
  features[3] = centroid_dist;
  features.segment<3>(4) =
      centroid_dist > 0.0 ? (centroid_offset / centroid_dist).eval() : Vec3::Zero().eval();
  return features;
}

namespace {

std::vector<MatX3> gather_members(const HierarchicalPartition& hp, Index level,
                                  const MatX3& positions) {
  const IndexVec to_level = hp.compose_to(level);
  const Index s = hp.size_at(level);
  std::vector<Index> counts(static_cast<std::size_t>(s), 0);
  for (Index p = 0; p < hp.point_count; ++p) ++counts[static_cast<std::size_t>(to_level[p])];
  std::vector<MatX3> members(static_cast<std::size_t>(s));
  for (Index c = 0; c < s; ++c)
    members[static_cast<std::size_t>(c)].resize(counts[static_cast<std::size_t>(c)], 3);
  std::vector<Index> fill(static_cast<std::size_t>(s), 0);
  for (Index p = 0; p < hp.point_count; ++p) {
    const Index c = to_level[p];
    members[static_cast<std::size_t>(c)].row(fill[static_cast<std::size_t>(c)]++) =
        positions.row(p);
  }
  return members;
}

}  // namespace

SuperpointGraph build_superpoint_graph(const HierarchicalPartition& hp, Index level,
                                       const MatX3& positions, const SpgraphConfig& config) {
  require(level >= 1 && level <= hp.level_count(), "level out of range");
  require(config.eps > 0.0, "eps must be > 0");
  require(config.num_steps >= 1, "num_steps must be >= 1");

  const HierarchyLevel& hl = hp.levels[static_cast<std::size_t>(level - 1)];
  const Index s = hl.component_count();
  const std::vector<MatX3> members = gather_members(hp, level, positions);

  // Large superpoints get a search tree for the nearest-member queries.
  constexpr Index kTreeThreshold = 64;
  std::vector<std::unique_ptr<KdTree>> trees(static_cast<std::size_t>(s));
  parallel_for(0, s, [&](Index c) {
    if (static_cast<Index>(members[static_cast<std::size_t>(c)].rows()) > kTreeThreshold)
      trees[static_cast<std::size_t>(c)] =
          std::make_unique<KdTree>(members[static_cast<std::size_t>(c)]);
  });
  auto view = [&](Index c) {
    return MemberView{members[static_cast<std::size_t>(c)],
                      trees[static_cast<std::size_t>(c)].get()};
  };

  // Candidate pairs: centroids within r_p + r_q + eps of each other.
  const double r_max = s > 0 ? hl.radii.maxCoeff() : 0.0;
  const KdTree centroid_tree(hl.centroids);
  std::vector<std::vector<std::pair<Index, GapResult>>> kept(static_cast<std::size_t>(s));
  parallel_for(0, s, [&](Index p) {
    const Vec3 cp = hl.centroids.row(p).transpose();
    const double reach = hl.radii[p] + r_max + config.eps;
    for (Index q : centroid_tree.radius_query(cp, reach)) {
      if (q <= p) continue;
      const double centroid_dist = (hl.centroids.row(q).transpose() - cp).norm();
      if (centroid_dist > hl.radii[p] + hl.radii[q] + config.eps) continue;
      const GapResult gap = gap_between(view(p), view(q), config.num_steps);
      if (gap.distance <= config.eps)
        kept[static_cast<std::size_t>(p)].emplace_back(q, gap);
    }
  });

  Index pair_count = 0;
  for (const auto& list : kept) pair_count += static_cast<Index>(list.size());

  SuperpointGraph graph;
  graph.level = level;
  graph.edges.resize(2 * pair_count, 2);
  graph.gaps.resize(2 * pair_count);
  graph.anchors.resize(2 * pair_count, 6);
  Index e = 0;
  for (Index p = 0; p < s; ++p) {
    for (const auto& [q, gap] : kept[static_cast<std::size_t>(p)]) {
      graph.edges(e, 0) = p;
      graph.edges(e, 1) = q;
      graph.gaps[e] = gap.distance;
      graph.anchors.row(e).segment<3>(0) = gap.anchor_p.transpose();
      graph.anchors.row(e).segment<3>(3) = gap.anchor_q.transpose();
      ++e;
    }
  }
  // Reverse orientations appended, then the whole list sorted by (src, dst).
  for (Index i = 0; i < pair_count; ++i) {
    graph.edges(pair_count + i, 0) = graph.edges(i, 1);
    graph.edges(pair_count + i, 1) = graph.edges(i, 0);
    graph.gaps[pair_count + i] = graph.gaps[i];
    graph.anchors.row(pair_count + i).segment<3>(0) = graph.anchors.row(i).segment<3>(3);
    graph.anchors.row(pair_count + i).segment<3>(3) = graph.anchors.row(i).segment<3>(0);
  }
  std::vector<Index> order(static_cast<std::size_t>(2 * pair_count));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](Index a, Index b) {
    if (graph.edges(a, 0) != graph.edges(b, 0)) return graph.edges(a, 0) < graph.edges(b, 0);
    return graph.edges(a, 1) < graph.edges(b, 1);
  });
  SuperpointGraph sorted;
  sorted.level = level;
  sorted.edges.resize(2 * pair_count, 2);
  sorted.gaps.resize(2 * pair_count);
  sorted.anchors.resize(2 * pair_count, 6);
  for (Index i = 0; i < 2 * pair_count; ++i) {
    sorted.edges.row(i) = graph.edges.row(order[static_cast<std::size_t>(i)]);
    sorted.gaps[i] = graph.gaps[order[static_cast<std::size_t>(i)]];
    sorted.anchors.row(i) = graph.anchors.row(order[static_cast<std::size_t>(i)]);
  }
  return sorted;
}

void compute_adjacency_features(const HierarchicalPartition& hp, const MatX3& positions,
                                SuperpointGraph& graph, const SpgraphConfig& config) {
  require(graph.level >= 1 && graph.level <= hp.level_count(), "graph level out of range");
  require(graph.anchors.rows() == graph.edges.rows(), "graph is missing gap anchors");

  const std::vector<MatX3> members = gather_members(hp, graph.level, positions);
  std::vector<SuperpointStats> stats(members.size());
  parallel_for(0, static_cast<Index>(members.size()), [&](Index c) {
    stats[static_cast<std::size_t>(c)] = superpoint_stats(members[static_cast<std::size_t>(c)]);
  });

  const Index e_count = graph.edge_count();
  const Index s = hp.size_at(graph.level);
  std::unordered_map<Index, Index> row_of;
  row_of.reserve(static_cast<std::size_t>(e_count));
  for (Index e = 0; e < e_count; ++e)
    row_of.emplace(graph.edges(e, 0) * s + graph.edges(e, 1), e);
  std::vector<std::pair<Index, Index>> pairs;
  pairs.reserve(static_cast<std::size_t>(e_count / 2));
  for (Index e = 0; e < e_count; ++e) {
    if (graph.edges(e, 0) >= graph.edges(e, 1)) continue;
    const auto it = row_of.find(graph.edges(e, 1) * s + graph.edges(e, 0));
    require(it != row_of.end(), "graph is missing a reverse orientation");
    pairs.emplace_back(e, it->second);
  }

  graph.features.resize(e_count, 18);
  // One computation per unordered pair; the reverse row is derived so the
  // orientation identities hold bit for bit.
  parallel_for(0, static_cast<Index>(pairs.size()), [&](Index i) {
    const auto [e, r] = pairs[static_cast<std::size_t>(i)];
    const Index p = graph.edges(e, 0), q = graph.edges(e, 1);
    const SuperpointStats& sp = stats[static_cast<std::size_t>(p)];
    const SuperpointStats& sq = stats[static_cast<std::size_t>(q)];
    const Vec3 anchor_p = graph.anchors.row(e).segment<3>(0).transpose();
    const Vec3 anchor_q = graph.anchors.row(e).segment<3>(3).transpose();
    const double window = graph.gaps[e] + 2.0 * config.voxel;
    const auto interface = interface_features(
        members[static_cast<std::size_t>(p)], members[static_cast<std::size_t>(q)], anchor_p,
        anchor_q, config.k_interface, std::max(window, 1e-12));
    const Vec3 mean_offset = interface.segment<3>(0);
    const auto pose = pose_features(sp, sq, mean_offset);

    graph.features.row(e).segment<7>(0) = interface.transpose();
    graph.features.row(e).segment<4>(7) = ratio_features(sp, sq).transpose();
    graph.features.row(e).segment<7>(11) = pose.transpose();

    graph.features.row(r).segment<3>(0) = -interface.segment<3>(0).transpose();
    graph.features.row(r).segment<4>(3) = interface.segment<4>(3).transpose();
    graph.features.row(r).segment<4>(7) = ratio_features(sq, sp).transpose();
    graph.features(r, 11) = pose[0];
    graph.features(r, 12) = pose[2];
    graph.features(r, 13) = pose[1];
    graph.features(r, 14) = pose[3];
    graph.features.row(r).segment<3>(15) = -pose.segment<3>(4).transpose();
  });
}

}  // namespace superpart
