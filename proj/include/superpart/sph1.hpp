#pragma once

#include "superpart/hierarchy.hpp"
#include "superpart/spgraph.hpp"

#include <string>
#include <vector>

namespace superpart {

// On-disk bundle of a hierarchical partition and its optional level graphs.
//
// Layout (little endian):
//   "SPH1"  u8 version  u8 level_count  u64 feature_dim
//   per level i = 1..I:
//     u64 parent element count N, u64 component count S,
//     u64[N] super_index, f32[S*3] centroids, f32[S*feature_dim] mean
//     features, u64[S] point counts, f32[S] radii
//   optionally, per level i = 1..I:
//     u64 edge count E, u64[E*2] oriented edges, f32[E*18] features,
//     f32[E] gaps
// The graph section is all-or-nothing: absent levels get E = 0 blocks.
// Gap anchors are scratch data and are not serialized.
struct Sph1File {
  HierarchicalPartition hierarchy;
  std::vector<SuperpointGraph> graphs;  // empty, or one entry per level
};

void write_sph1(const std::string& path, const Sph1File& file);
Sph1File read_sph1(const std::string& path);

}  // namespace superpart
