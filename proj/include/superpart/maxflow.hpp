#pragma once

#include <cstdint>
#include <vector>

namespace superpart {

// Dinic max-flow / min-cut over a small-integer node space with real
// capacities. Augmentation subtracts the exact bottleneck, so residuals
// never go negative and the phase structure guarantees termination for
// arbitrary double capacities. Deterministic: arc order is insertion order.
class MaxFlow {
 public:
  explicit MaxFlow(std::int32_t node_count);

  // Capacities source->node and node->sink. Call at most once per node or
  // accumulate beforehand; repeated calls add parallel arcs (harmless).
  void add_terminal(std::int32_t node, double cap_source, double cap_sink);

  // Directed residual pair u->v / v->u.
  void add_edge(std::int32_t u, std::int32_t v, double cap_uv, double cap_vu);

  double solve();

  // Valid after solve(): true when the node sits on the source side of the
  // minimum cut.
  bool source_side(std::int32_t node) const { return level_[static_cast<std::size_t>(node)] >= 0; }

 private:
  bool bfs();
  double augment();

  std::int32_t n_;       // user nodes; source = n_, sink = n_ + 1
  std::vector<std::int32_t> first_;
  std::vector<std::int32_t> next_;
  std::vector<std::int32_t> to_;
  std::vector<double> cap_;
  std::vector<std::int32_t> level_;
  std::vector<std::int32_t> iter_;
  std::vector<std::int32_t> queue_;
  std::vector<std::int32_t> path_;
};

}  // namespace superpart
