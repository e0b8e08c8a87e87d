#pragma once

#include "superpart/core.hpp"

namespace superpart {

// Piecewise-constant approximation of a node signal over a weighted graph:
// components of constant value, penalized by the weighted cut length.
struct Partition {
  IndexVec super_index;  // N×1, contiguous component ids 0..S-1
  Mat component_value;   // S×D mean signal per component
  IndexVec component_size;
  Index component_count() const { return static_cast<Index>(component_value.rows()); }
};

struct SolverConfig {
  double lambda{1.0};
  int max_outer_iters{10};
  int split_inner_iters{2};
  std::uint64_t seed{0};
  bool parallel{true};
};

// J(e; f, G, λ) = Σ_u w_u·‖e_u − f_u‖² + λ·Σ_{(u,v)∈E} w_uv·[e_u ≠ e_v].
// Row overload compares signal rows exactly (float equality on e);
// partition overload compares component ids. node_weight empty = all ones.
double energy(const Mat& signal, const Mat& f, const WeightedGraph& graph, double lambda,
              const Vec& node_weight = Vec());
double energy(const Partition& partition, const Mat& f, const WeightedGraph& graph, double lambda,
              const Vec& node_weight = Vec());

// Split/merge heuristic minimizer of J. Components of the graph are solved
// independently; SPLIT alternates 2-means candidate refitting with a binary
// min-cut, MERGE greedily joins adjacent components while the energy
// strictly decreases. λ=0 returns the connected level-set partition of f.
// Deterministic for fixed config, identical with parallel on or off.
Partition minimize_l0(const Mat& f, const WeightedGraph& graph, const SolverConfig& config,
                      const Vec& node_weight = Vec());

// Exact minimizer by enumerating all 2^E edge subsets, deriving connected
// components and their mean values. Ties resolved toward the
// lexicographically smallest canonical super_index. Refuses N > 12 (and
// E > 24, which the subset enumeration cannot afford).
Partition brute_force_partition(const Mat& f, const WeightedGraph& graph, double lambda);

}  // namespace superpart
