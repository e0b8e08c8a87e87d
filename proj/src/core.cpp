#include "superpart/core.hpp"

#include <algorithm>
#include <numeric>

namespace superpart {

GraphCsr build_csr(const WeightedGraph& graph) {
  GraphCsr csr;
  const Index n = graph.node_count;
  const Index e = graph.edge_count();
  csr.offsets.assign(static_cast<std::size_t>(n) + 1, 0);
  for (Index i = 0; i < e; ++i) {
    ++csr.offsets[static_cast<std::size_t>(graph.edges(i, 0)) + 1];
    ++csr.offsets[static_cast<std::size_t>(graph.edges(i, 1)) + 1];
  }
  std::partial_sum(csr.offsets.begin(), csr.offsets.end(), csr.offsets.begin());
  csr.neighbors.resize(static_cast<std::size_t>(2 * e));
  csr.edge_ids.resize(static_cast<std::size_t>(2 * e));
  csr.weights.resize(static_cast<std::size_t>(2 * e));
  std::vector<Index> cursor(csr.offsets.begin(), csr.offsets.end() - 1);
  for (Index i = 0; i < e; ++i) {
    const Index u = graph.edges(i, 0);
    const Index v = graph.edges(i, 1);
    const double w = graph.weights[i];
    Index& cu = cursor[static_cast<std::size_t>(u)];
    csr.neighbors[static_cast<std::size_t>(cu)] = v;
    csr.edge_ids[static_cast<std::size_t>(cu)] = i;
    csr.weights[static_cast<std::size_t>(cu)] = w;
    ++cu;
    Index& cv = cursor[static_cast<std::size_t>(v)];
    csr.neighbors[static_cast<std::size_t>(cv)] = u;
    csr.edge_ids[static_cast<std::size_t>(cv)] = i;
    csr.weights[static_cast<std::size_t>(cv)] = w;
    ++cv;
  }
  return csr;
}

std::pair<std::vector<Index>, Index> connected_components(const WeightedGraph& graph) {
  const Index n = graph.node_count;
  const GraphCsr csr = build_csr(graph);
  std::vector<Index> component(static_cast<std::size_t>(n), -1);
  std::vector<Index> stack;
  Index next_id = 0;
  for (Index seed = 0; seed < n; ++seed) {
    if (component[static_cast<std::size_t>(seed)] >= 0) continue;
    component[static_cast<std::size_t>(seed)] = next_id;
    stack.push_back(seed);
    while (!stack.empty()) {
      const Index u = stack.back();
      stack.pop_back();
      for (Index j = csr.offsets[static_cast<std::size_t>(u)];
           j < csr.offsets[static_cast<std::size_t>(u) + 1]; ++j) {
        const Index v = csr.neighbors[static_cast<std::size_t>(j)];
        if (component[static_cast<std::size_t>(v)] < 0) {
          component[static_cast<std::size_t>(v)] = next_id;
          stack.push_back(v);
        }
      }
    }
    ++next_id;
  }
  return {std::move(component), next_id};
}

}  // namespace superpart
