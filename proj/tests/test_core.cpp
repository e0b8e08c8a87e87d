#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "superpart/core.hpp"
#include "test_helpers.hpp"

#include <algorithm>
#include <functional>
#include <set>
#include <vector>

using namespace superpart;

namespace {

WeightedGraph make_graph(Index n, std::vector<std::pair<Index, Index>> edges) {
  WeightedGraph g;
  g.node_count = n;
  g.edges.resize(static_cast<Index>(edges.size()), 2);
  g.weights = Vec::Ones(static_cast<Index>(edges.size()));
  for (std::size_t i = 0; i < edges.size(); ++i) {
    g.edges(static_cast<Index>(i), 0) = edges[i].first;
    g.edges(static_cast<Index>(i), 1) = edges[i].second;
  }
  return g;
}

}  // namespace

TEST_CASE("build_csr on a hand-checked graph") {
  // 0-1, 1-2, 0-2, 2-3; node 4 isolated.
  WeightedGraph g = make_graph(5, {{0, 1}, {1, 2}, {0, 2}, {2, 3}});
  g.weights << 1.0, 2.0, 3.0, 4.0;
  GraphCsr csr = build_csr(g);

  REQUIRE(csr.offsets.size() == 6);
  CHECK(csr.offsets[0] == 0);
  CHECK(csr.degree(0) == 2);
  CHECK(csr.degree(1) == 2);
  CHECK(csr.degree(2) == 3);
  CHECK(csr.degree(3) == 1);
  CHECK(csr.degree(4) == 0);
  CHECK(csr.neighbors.size() == 8);

  // Every (u, v, edge_id, w) entry must mirror an input edge, and each edge
  // id must appear exactly twice.
  std::vector<int> seen(4, 0);
  for (Index u = 0; u < 5; ++u) {
    for (Index j = csr.offsets[u]; j < csr.offsets[u + 1]; ++j) {
      const Index v = csr.neighbors[j];
      const Index id = csr.edge_ids[j];
      ++seen[id];
      const Index a = g.edges(id, 0), b = g.edges(id, 1);
      CHECK(((a == u && b == v) || (a == v && b == u)));
      CHECK(csr.weights[j] == g.weights[id]);
    }
  }
  for (int c : seen) CHECK(c == 2);
}

TEST_CASE("build_csr on an empty graph") {
  WeightedGraph g;
  g.node_count = 3;
  g.edges.resize(0, 2);
  g.weights.resize(0);
  GraphCsr csr = build_csr(g);
  REQUIRE(csr.offsets.size() == 4);
  for (Index u = 0; u < 3; ++u) CHECK(csr.degree(u) == 0);
  CHECK(csr.neighbors.empty());
}

TEST_CASE("connected_components ids ordered by smallest member") {
  // Components: {0,2}, {1,4}, {3}. Smallest members 0 < 1 < 3 fix the ids.
  WeightedGraph g = make_graph(5, {{0, 2}, {1, 4}});
  auto [comp, count] = connected_components(g);
  REQUIRE(count == 3);
  CHECK(comp[0] == 0);
  CHECK(comp[2] == 0);
  CHECK(comp[1] == 1);
  CHECK(comp[4] == 1);
  CHECK(comp[3] == 2);
}

TEST_CASE("connected_components vs union-find oracle on random graphs") {
  auto gen = testutil::rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = 2 + static_cast<Index>(gen() % 40);
    // Random edges, possibly disconnected.
    std::vector<std::pair<Index, Index>> edges;
    const Index e = static_cast<Index>(gen() % (2 * n));
    for (Index t = 0; t < e; ++t) {
      Index u = static_cast<Index>(gen() % n);
      Index v = static_cast<Index>(gen() % n);
      if (u == v) continue;
      edges.emplace_back(std::min(u, v), std::max(u, v));
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    WeightedGraph g = make_graph(n, edges);

    // Union-find oracle.
    std::vector<Index> root(n);
    for (Index i = 0; i < n; ++i) root[i] = i;
    std::function<Index(Index)> find = [&](Index x) {
      while (root[x] != x) x = root[x] = root[root[x]];
      return x;
    };
    for (auto [u, v] : edges) root[find(u)] = find(v);

    auto [comp, count] = connected_components(g);
    // Same partition relation.
    for (Index u = 0; u < n; ++u)
      for (Index v = 0; v < n; ++v)
        CHECK((comp[u] == comp[v]) == (find(u) == find(v)));
    // Contiguous ids, ordered by smallest member.
    std::vector<Index> first_node(count, -1);
    for (Index u = 0; u < n; ++u)
      if (first_node[comp[u]] < 0) first_node[comp[u]] = u;
    for (Index c = 0; c + 1 < count; ++c) CHECK(first_node[c] < first_node[c + 1]);
  }
}

TEST_CASE("require throws invalid_argument with the message") {
  CHECK_NOTHROW(require(true, "fine"));
  CHECK_THROWS_AS(require(false, "boom"), std::invalid_argument);
  try {
    require(false, "specific message");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()) == "specific message");
  }
}
