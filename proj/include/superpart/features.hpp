#pragma once

#include "superpart/core.hpp"

namespace superpart {

struct LocalPca {
  Mat eigenvalues;                 // N×3, sorted descending, clamped at 0
  std::vector<Mat3> eigenvectors;  // columns match eigenvalue order
};

// Eigen-decomposition of the 3x3 covariance of {neighbors ∪ self} for every
// point, centered at the neighborhood mean. Degenerate neighborhoods give
// all-zero eigenvalues and canonical axis eigenvectors.
LocalPca local_pca(const MatX3& positions,
                   const Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>&
                       neighbor_table);

// Per-point [linearity, planarity, scattering, verticality] in [0,1], from
// square-rooted eigenvalues s_i = sqrt(λ_i):
//   linearity = (s1-s2)/s1, planarity = (s2-s3)/s1, scattering = s3/s1,
// all 0 when s1 = 0. Verticality is the vertical component of the
// unit-normalized vector û = Σ_i s_i·|e_i| (componentwise absolute
// eigenvectors).
Mat dimensionality_features(const LocalPca& pca);

struct GroundPlane {
  Vec3 normal = Vec3::UnitZ();  // unit, oriented with normal·z >= 0
  double offset{0.0};           // plane = {x : normal·x = offset}
  Index inlier_count{0};
};

struct RansacConfig {
  int iterations{500};
  double inlier_threshold{0.1};
  double coarse_voxel{0.5};
  std::uint64_t seed{0};
};

// RANSAC plane fit on a coarse voxel subsampling of the cloud. Deterministic
// given the seed. Throws when fewer than 3 candidate points remain.
GroundPlane estimate_ground_plane(const PointCloud& cloud, const RansacConfig& config);

// Signed point-to-plane distance divided by `divisor`, clamped to [0,1].
Vec elevation_feature(const PointCloud& cloud, const GroundPlane& plane, double divisor);

struct FeatureConfig {
  Index k_feat{50};
  double mu{0.1};            // 1/m, scales the optional spatial block
  double divisor{4.0};       // elevation normalizer
  bool include_spatial{false};
  RansacConfig ransac;
};

struct PointFeatureTable {
  Mat geometric;   // N×5: linearity, planarity, scattering, verticality, elevation
  Mat radiometric; // N×R
  Mat spatial;     // N×3 = mu·positions when requested, else 0×0
  Mat concatenated() const;
};

// Full handcrafted feature pipeline: 50-NN local PCA, dimensionality
// features, ground-plane elevation, radiometry passthrough, optional
// mu-scaled coordinates. Column order of concatenated():
// [linearity, planarity, scattering, verticality, elevation | radiometry | mu·xyz].
PointFeatureTable assemble_point_features(const PointCloud& cloud, const FeatureConfig& config);

}  // namespace superpart
