#include "superpart/maxflow.hpp"

#include <algorithm>

namespace superpart {

MaxFlow::MaxFlow(std::int32_t node_count) : n_(node_count) {
  first_.assign(static_cast<std::size_t>(n_) + 2, -1);
  level_.assign(static_cast<std::size_t>(n_) + 2, -1);
  iter_.assign(static_cast<std::size_t>(n_) + 2, -1);
}

void MaxFlow::add_edge(std::int32_t u, std::int32_t v, double cap_uv, double cap_vu) {
  const auto arc = static_cast<std::int32_t>(to_.size());
  to_.push_back(v);
  cap_.push_back(cap_uv);
  next_.push_back(first_[static_cast<std::size_t>(u)]);
  first_[static_cast<std::size_t>(u)] = arc;
  to_.push_back(u);
  cap_.push_back(cap_vu);
  next_.push_back(first_[static_cast<std::size_t>(v)]);
  first_[static_cast<std::size_t>(v)] = arc + 1;
}

void MaxFlow::add_terminal(std::int32_t node, double cap_source, double cap_sink) {
  if (cap_source > 0.0) add_edge(n_, node, cap_source, 0.0);
  if (cap_sink > 0.0) add_edge(node, n_ + 1, cap_sink, 0.0);
}

bool MaxFlow::bfs() {
  std::fill(level_.begin(), level_.end(), -1);
  queue_.clear();
  queue_.push_back(n_);
  level_[static_cast<std::size_t>(n_)] = 0;
  for (std::size_t head = 0; head < queue_.size(); ++head) {
    const std::int32_t u = queue_[head];
    for (std::int32_t a = first_[static_cast<std::size_t>(u)]; a >= 0;
         a = next_[static_cast<std::size_t>(a)]) {
      const std::int32_t v = to_[static_cast<std::size_t>(a)];
      if (cap_[static_cast<std::size_t>(a)] > 0.0 && level_[static_cast<std::size_t>(v)] < 0) {
        level_[static_cast<std::size_t>(v)] = level_[static_cast<std::size_t>(u)] + 1;
        queue_.push_back(v);
      }
    }
  }
  return level_[static_cast<std::size_t>(n_) + 1] >= 0;
}

double MaxFlow::augment() {
  const std::int32_t source = n_, sink = n_ + 1;
  path_.clear();
  std::int32_t u = source;
  while (true) {
    if (u == sink) {
      double bottleneck = cap_[static_cast<std::size_t>(path_[0])];
      for (std::int32_t a : path_) bottleneck = std::min(bottleneck, cap_[static_cast<std::size_t>(a)]);
      for (std::int32_t a : path_) {
        cap_[static_cast<std::size_t>(a)] -= bottleneck;
        cap_[static_cast<std::size_t>(a ^ 1)] += bottleneck;
      }
      return bottleneck;
    }
    std::int32_t a = iter_[static_cast<std::size_t>(u)];
    for (; a >= 0; a = next_[static_cast<std::size_t>(a)]) {
      const std::int32_t v = to_[static_cast<std::size_t>(a)];
      if (cap_[static_cast<std::size_t>(a)] > 0.0 &&
          level_[static_cast<std::size_t>(v)] == level_[static_cast<std::size_t>(u)] + 1)
        break;
      iter_[static_cast<std::size_t>(u)] = next_[static_cast<std::size_t>(a)];
    }
    if (a < 0) {
      level_[static_cast<std::size_t>(u)] = -1;  // dead end in this phase
      if (path_.empty()) return 0.0;
      u = to_[static_cast<std::size_t>(path_.back() ^ 1)];
      path_.pop_back();
    } else {
      path_.push_back(a);
      u = to_[static_cast<std::size_t>(a)];
    }
  }
}

double MaxFlow::solve() {
  double flow = 0.0;
  while (bfs()) {
    for (std::size_t u = 0; u < iter_.size(); ++u) iter_[u] = first_[u];
    while (true) {
      const double pushed = augment();
      if (pushed <= 0.0) break;
      flow += pushed;
    }
  }
  // level_ now holds the final BFS labeling: reachable == source side.
  return flow;
}

}  // namespace superpart
