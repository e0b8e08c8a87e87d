#include "superpart/neighborhood.hpp"

#include "superpart/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

namespace superpart {

namespace {

struct HeapEntry {
  double dist2;
  Index index;
  bool operator<(const HeapEntry& o) const {
    if (dist2 != o.dist2) return dist2 < o.dist2;
    return index < o.index;
  }
};

}  // namespace

KdTree::KdTree(const MatX3& points, Index leaf_size)
    : points_(points), leaf_size_(std::max<Index>(1, leaf_size)) {
  const Index n = static_cast<Index>(points_.rows());
  order_.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order_[static_cast<std::size_t>(i)] = i;
  if (n > 0) {
    nodes_.reserve(static_cast<std::size_t>(2 * n / leaf_size_ + 2));
    build(0, n);
  }
}

Index KdTree::build(Index begin, Index end) {
  const Index node_id = static_cast<Index>(nodes_.size());
  nodes_.emplace_back();
  {
    Node& node = nodes_.back();
    node.begin = begin;
    node.end = end;
    node.box_min = Vec3::Constant(std::numeric_limits<double>::infinity());
    node.box_max = Vec3::Constant(-std::numeric_limits<double>::infinity());
    for (Index i = begin; i < end; ++i) {
      const Vec3 p = points_.row(order_[static_cast<std::size_t>(i)]).transpose();
      node.box_min = node.box_min.cwiseMin(p);
      node.box_max = node.box_max.cwiseMax(p);
    }
  }

  const Vec3 extent = nodes_[static_cast<std::size_t>(node_id)].box_max -
                      nodes_[static_cast<std::size_t>(node_id)].box_min;
  if (end - begin <= leaf_size_ || extent.maxCoeff() <= 0.0) return node_id;

  int axis = 0;
  extent.maxCoeff(&axis);
  const Index mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](Index a, Index b) {
                     const double pa = points_(a, axis), pb = points_(b, axis);
                     if (pa != pb) return pa < pb;
                     return a < b;
                   });
  const double split = points_(order_[static_cast<std::size_t>(mid)], axis);

  const Index left = build(begin, mid);
  const Index right = build(mid, end);
  Node& node = nodes_[static_cast<std::size_t>(node_id)];
  node.axis = axis;
  node.split = split;
  node.left = left;
  node.right = right;
  return node_id;
}

std::vector<Index> KdTree::knn(const Vec3& query, Index k, Index exclude) const {
  const Index n = size();
  require(k > 0, "k must be > 0");
  std::priority_queue<HeapEntry> heap;  // max-heap on (dist², index)

  auto box_dist2 = [&](const Node& node) {
    double d2 = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double lo = node.box_min[a] - query[a];
      const double hi = query[a] - node.box_max[a];
      const double d = std::max({lo, hi, 0.0});
      d2 += d * d;
    }
    return d2;
  };

  // Worst accepted entry; a subtree is skipped only when its box distance
  // strictly exceeds worst.dist2, so equal-distance candidates still get
  // visited and the index tie-break stays exact.
  auto worse_than_worst = [&](double dist2) {
    return static_cast<Index>(heap.size()) == k && dist2 > heap.top().dist2;
  };

  struct Visit {
    Index node;
    double dist2;
  };
  std::vector<Visit> stack;
  stack.push_back({0, box_dist2(nodes_[0])});
  while (!stack.empty()) {
    const Visit visit = stack.back();
    stack.pop_back();
    if (worse_than_worst(visit.dist2)) continue;
    const Node& node = nodes_[static_cast<std::size_t>(visit.node)];
    if (node.axis < 0) {
      for (Index i = node.begin; i < node.end; ++i) {
        const Index idx = order_[static_cast<std::size_t>(i)];
        if (idx == exclude) continue;
        const double d2 = (points_.row(idx).transpose() - query).squaredNorm();
        const HeapEntry entry{d2, idx};
        if (static_cast<Index>(heap.size()) < k) {
          heap.push(entry);
        } else if (entry < heap.top()) {
          heap.pop();
          heap.push(entry);
        }
      }
      continue;
    }
    const Node& left = nodes_[static_cast<std::size_t>(node.left)];
    const Node& right = nodes_[static_cast<std::size_t>(node.right)];
    const double dl = box_dist2(left);
    const double dr = box_dist2(right);
    // Push the farther child first so the nearer one is processed next.
    if (dl <= dr) {
      stack.push_back({node.right, dr});
      stack.push_back({node.left, dl});
    } else {
      stack.push_back({node.left, dl});
      stack.push_back({node.right, dr});
    }
  }
  (void)n;

  std::vector<HeapEntry> entries;
  entries.reserve(heap.size());
  while (!heap.empty()) {
    entries.push_back(heap.top());
    heap.pop();
  }
  std::vector<Index> result(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i)
    result[entries.size() - 1 - i] = entries[i].index;
  return result;
}

std::vector<Index> KdTree::radius_query(const Vec3& center, double radius) const {
  require(radius > 0.0, "radius must be > 0");
  const double r2 = radius * radius;
  std::vector<Index> result;
  if (nodes_.empty()) return result;

  auto box_dist2 = [&](const Node& node) {
    double d2 = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double lo = node.box_min[a] - center[a];
      const double hi = center[a] - node.box_max[a];
      const double d = std::max({lo, hi, 0.0});
      d2 += d * d;
    }
    return d2;
  };

  std::vector<Index> stack{0};
  while (!stack.empty()) {
    const Index node_id = stack.back();
    stack.pop_back();
    const Node& node = nodes_[static_cast<std::size_t>(node_id)];
    if (box_dist2(node) > r2) continue;
    if (node.axis < 0) {
      for (Index i = node.begin; i < node.end; ++i) {
        const Index idx = order_[static_cast<std::size_t>(i)];
        if ((points_.row(idx).transpose() - center).squaredNorm() <= r2) result.push_back(idx);
      }
      continue;
    }
    stack.push_back(node.left);
    stack.push_back(node.right);
  }
  std::sort(result.begin(), result.end());
  return result;
}

Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> knn_indices(
    const MatX3& points, Index k) {
  const Index n = static_cast<Index>(points.rows());
  require(k > 0, "k must be > 0");
  require(k < n, "k must be < number of points");
  const KdTree tree(points);
  Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> result(n, k);
  parallel_for(0, n, [&](Index p) {
    const std::vector<Index> nn = tree.knn(points.row(p).transpose(), k, p);
    for (Index j = 0; j < k; ++j) result(p, j) = nn[static_cast<std::size_t>(j)];
  });
  return result;
}

WeightedGraph build_knn_graph(const MatX3& points, Index k) {
  const auto nn = knn_indices(points, k);
  const Index n = static_cast<Index>(points.rows());
  std::vector<std::pair<Index, Index>> pairs;
  pairs.reserve(static_cast<std::size_t>(n * k));
  for (Index p = 0; p < n; ++p)
    for (Index j = 0; j < k; ++j) {
      const Index q = nn(p, j);
      pairs.emplace_back(std::min(p, q), std::max(p, q));
    }
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());

  WeightedGraph graph;
  graph.node_count = n;
  graph.edges.resize(static_cast<Index>(pairs.size()), 2);
  graph.weights = Vec::Ones(static_cast<Index>(pairs.size()));
  for (std::size_t e = 0; e < pairs.size(); ++e) {
    graph.edges(static_cast<Index>(e), 0) = pairs[e].first;
    graph.edges(static_cast<Index>(e), 1) = pairs[e].second;
  }
  return graph;
}

std::vector<std::vector<Index>> neighbors_within(const MatX3& points, const MatX3& queries,
                                                 double radius) {
  require(radius > 0.0, "radius must be > 0");
  const KdTree tree(points);
  const Index m = static_cast<Index>(queries.rows());
  std::vector<std::vector<Index>> result(static_cast<std::size_t>(m));
  parallel_for(0, m, [&](Index q) {
    result[static_cast<std::size_t>(q)] = tree.radius_query(queries.row(q).transpose(), radius);
  });
  return result;
}

}  // namespace superpart
