#include "superpart/features.hpp"

#include "superpart/cloud_io.hpp"
#include "superpart/neighborhood.hpp"
#include "superpart/parallel.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <random>

namespace superpart {

LocalPca local_pca(const MatX3& positions,
                   const Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>&
                       neighbor_table) {
  const Index n = static_cast<Index>(positions.rows());
  const Index k = static_cast<Index>(neighbor_table.cols());
  require(k >= 3, "neighbor table must have k >= 3");
  require(static_cast<Index>(neighbor_table.rows()) == n, "neighbor table row count mismatch");

  LocalPca result;
  result.eigenvalues.resize(n, 3);
  result.eigenvectors.resize(static_cast<std::size_t>(n));

  parallel_for(0, n, [&](Index p) {
    Vec3 mean = positions.row(p).transpose();
    for (Index j = 0; j < k; ++j) mean += positions.row(neighbor_table(p, j)).transpose();
    mean /= static_cast<double>(k + 1);

    Mat3 cov = Mat3::Zero();
    {
      const Vec3 d = positions.row(p).transpose() - mean;
      cov += d * d.transpose();
    }
    for (Index j = 0; j < k; ++j) {
      const Vec3 d = positions.row(neighbor_table(p, j)).transpose() - mean;
      cov += d * d.transpose();
    }
    cov /= static_cast<double>(k + 1);

    if (cov.cwiseAbs().maxCoeff() == 0.0) {
      result.eigenvalues.row(p).setZero();
      result.eigenvectors[static_cast<std::size_t>(p)] = Mat3::Identity();
      return;
    }

    Eigen::SelfAdjointEigenSolver<Mat3> solver(cov);
    // SelfAdjointEigenSolver sorts ascending; flip to descending.
    for (int i = 0; i < 3; ++i) {
      result.eigenvalues(p, i) = std::max(0.0, solver.eigenvalues()[2 - i]);
      result.eigenvectors[static_cast<std::size_t>(p)].col(i) = solver.eigenvectors().col(2 - i);
    }
  });
  return result;
}

Mat dimensionality_features(const LocalPca& pca) {
  const Index n = static_cast<Index>(pca.eigenvalues.rows());
  Mat out(n, 4);
  parallel_for(0, n, [&](Index p) {
    const double s1 = std::sqrt(pca.eigenvalues(p, 0));
    const double s2 = std::sqrt(pca.eigenvalues(p, 1));
    const double s3 = std::sqrt(pca.eigenvalues(p, 2));
    if (s1 <= 0.0) {
      out(p, 0) = out(p, 1) = out(p, 2) = out(p, 3) = 0.0;
      return;
    }
    out(p, 0) = (s1 - s2) / s1;
    out(p, 1) = (s2 - s3) / s1;
    out(p, 2) = s3 / s1;
    const Mat3& ev = pca.eigenvectors[static_cast<std::size_t>(p)];
    Vec3 u = Vec3::Zero();
    const double s[3] = {s1, s2, s3};
    for (int i = 0; i < 3; ++i) u += s[i] * ev.col(i).cwiseAbs();
    const double norm = u.norm();
    out(p, 3) = norm > 0.0 ? u[2] / norm : 0.0;
  });
  return out;
}

GroundPlane estimate_ground_plane(const PointCloud& cloud, const RansacConfig& config) {
  require(config.iterations > 0, "iterations must be > 0");
  require(config.inlier_threshold > 0.0, "inlier_threshold must be > 0");
  require(config.coarse_voxel > 0.0, "coarse_voxel must be > 0");

  const MatX3 candidates = voxel_subsample(cloud, config.coarse_voxel).cloud.positions;
  const Index m = static_cast<Index>(candidates.rows());
  if (m < 3) throw std::runtime_error("ground plane estimation needs >= 3 candidate points");

  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<Index> pick(0, m - 1);

  GroundPlane best;
  best.inlier_count = -1;
  for (int iter = 0; iter < config.iterations; ++iter) {
    const Index a = pick(rng), b = pick(rng), c = pick(rng);
    if (a == b || b == c || a == c) continue;
    const Vec3 pa = candidates.row(a).transpose();
    Vec3 normal = (candidates.row(b).transpose() - pa)
                      .cross(candidates.row(c).transpose() - pa);
    const double len = normal.norm();
    if (len <= 0.0) continue;
    normal /= len;
    const double offset = normal.dot(pa);
    Index inliers = 0;
    for (Index p = 0; p < m; ++p)
      if (std::abs(normal.dot(candidates.row(p).transpose()) - offset) <=
          config.inlier_threshold)
        ++inliers;
    if (inliers > best.inlier_count) {
      best.normal = normal;
      best.offset = offset;
      best.inlier_count = inliers;
    }
  }
  if (best.inlier_count < 0) throw std::runtime_error("ground plane estimation found no valid sample");

  // Orient upward; a vertical plane falls back to the majority side.
  if (best.normal[2] < 0.0) {
    best.normal = -best.normal;
    best.offset = -best.offset;
  } else if (best.normal[2] == 0.0) {
    Index above = 0;
    for (Index p = 0; p < m; ++p)
      if (best.normal.dot(candidates.row(p).transpose()) - best.offset >= 0.0) ++above;
    if (2 * above < m) {
      best.normal = -best.normal;
      best.offset = -best.offset;
    }
  }

  // Scoring runs on the coarse candidates; the reported count covers the
  // full cloud.
  Index full_inliers = 0;
  for (Index p = 0; p < cloud.size(); ++p)
    if (std::abs(best.normal.dot(cloud.positions.row(p).transpose()) - best.offset) <=
        config.inlier_threshold)
      ++full_inliers;
  best.inlier_count = full_inliers;
  return best;
}

Vec elevation_feature(const PointCloud& cloud, const GroundPlane& plane, double divisor) {
  require(divisor > 0.0, "divisor must be > 0");
  const Index n = cloud.size();
  Vec out(n);
  parallel_for(0, n, [&](Index p) {
    const double dist = plane.normal.dot(cloud.positions.row(p).transpose()) - plane.offset;
    out[p] = std::clamp(dist / divisor, 0.0, 1.0);
  });
  return out;
}

Mat PointFeatureTable::concatenated() const {
  const Index n = static_cast<Index>(geometric.rows());
  const Index r = static_cast<Index>(radiometric.cols());
  const Index s = static_cast<Index>(spatial.cols());
  Mat out(n, 5 + r + s);
  out.leftCols(5) = geometric;
  if (r > 0) out.middleCols(5, r) = radiometric;
  if (s > 0) out.rightCols(3) = spatial;
  return out;
}

PointFeatureTable assemble_point_features(const PointCloud& cloud, const FeatureConfig& config) {
  const Index n = cloud.size();
  require(n > config.k_feat, "cloud must have more than k_feat points");

  const auto neighbors = knn_indices(cloud.positions, config.k_feat);
  const LocalPca pca = local_pca(cloud.positions, neighbors);
  const Mat dims = dimensionality_features(pca);
  const GroundPlane plane = estimate_ground_plane(cloud, config.ransac);
  const Vec elev = elevation_feature(cloud, plane, config.divisor);

  PointFeatureTable table;
  table.geometric.resize(n, 5);
  table.geometric.leftCols(4) = dims;
  table.geometric.col(4) = elev;
  table.radiometric = cloud.radiometry;
  if (config.include_spatial) table.spatial = config.mu * cloud.positions;
  return table;
}

}  // namespace superpart
