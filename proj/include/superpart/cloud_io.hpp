#pragma once

#include "superpart/core.hpp"

#include <string>
#include <vector>

namespace superpart {

enum class CloudFormat { PlyAscii, PlyBinary, XyzText };

/// Property-name mapping and normalization knobs for ingestion.
struct ReadOptions {
  std::string label_property = "label";
  std::string intensity_property = "intensity";
  // Declared maximum for float intensity channels; 1.0 means pass-through.
  double intensity_max = 1.0;
};

/// Reads a PLY (ascii or binary little-endian) or whitespace-delimited XYZ
/// text file. Radiometry is normalized to [0,1]: uchar/255, ushort/65535,
/// float intensity divided by the declared max. Format is chosen by file
/// content (PLY magic) rather than extension.
PointCloud read_cloud(const std::string& path, const ReadOptions& options = {});

/// Writes a cloud readable by read_cloud. Positions are stored as float32;
/// RGB as uchar, intensity as float32, labels as int32 (property name from
/// options.label_property).
void write_cloud(const PointCloud& cloud, const std::string& path, CloudFormat format,
                 const ReadOptions& options = {});

struct VoxelSubsampleResult {
  PointCloud cloud;
  // groups[m] lists the original indices merged into output point m,
  // ascending; every original index appears in exactly one group.
  std::vector<std::vector<Index>> groups;
};

/// Grid subsampling: one point per nonempty voxel, anchored at the floor of
/// coordinates / voxel_size with origin (0,0,0). Position = member centroid,
/// radiometry = mean, label = most frequent member label with ties broken by
/// the smallest class id. Output is ordered by voxel key, so it is invariant
/// to input point order.
VoxelSubsampleResult voxel_subsample(const PointCloud& cloud, double voxel_size);

/// Indices of all points with ||p - center|| <= radius, ascending.
std::vector<Index> sample_sphere(const PointCloud& cloud, const Vec3& center, double radius);

}  // namespace superpart
