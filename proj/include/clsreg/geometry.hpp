#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Geometry>

namespace clsreg {

// A point cloud: one point per row, dimension = column count. Row order is
// stable, so indices identify points across calls.
struct PointCloud {
  Eigen::MatrixXd points;

  PointCloud() = default;
  explicit PointCloud(Eigen::MatrixXd pts) : points(std::move(pts)) {}

  Eigen::Index size() const { return points.rows(); }
  int dim() const { return static_cast<int>(points.cols()); }
  bool empty() const { return points.rows() == 0; }
  bool all_finite() const { return points.allFinite(); }
};

struct BoundingBox {
  Eigen::VectorXd min;
  Eigen::VectorXd max;
  double diagonal() const { return (max - min).norm(); }
};

inline BoundingBox bounding_box(const PointCloud& cloud) {
  if (cloud.empty()) throw std::invalid_argument("bounding_box: empty cloud");
  return {cloud.points.colwise().minCoeff().transpose(),
          cloud.points.colwise().maxCoeff().transpose()};
}

inline double bbox_diagonal(const PointCloud& cloud) { return bounding_box(cloud).diagonal(); }

// Rotation (unit quaternion) followed by translation.
struct RigidTransform {
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static RigidTransform identity() { return {}; }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
};

// compose(second, first): apply `first`, then `second`.
inline RigidTransform compose(const RigidTransform& second, const RigidTransform& first) {
  RigidTransform out;
  out.rotation = (second.rotation * first.rotation).normalized();
  out.translation = second.rotation * first.translation + second.translation;
  return out;
}

inline RigidTransform inverse(const RigidTransform& t) {
  RigidTransform out;
  out.rotation = t.rotation.conjugate();
  out.translation = -(out.rotation * t.translation);
  return out;
}

struct Pose {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Eigen::Quaterniond orientation = Eigen::Quaterniond::Identity();
};

inline PointCloud apply_rigid(const PointCloud& cloud, const RigidTransform& t) {
  if (cloud.dim() != 3) throw std::invalid_argument("apply_rigid: cloud must be 3-D");
  const Eigen::Matrix3d R = t.rotation.toRotationMatrix();
  PointCloud out;
  out.points = cloud.points * R.transpose();
  out.points.rowwise() += t.translation.transpose();
  return out;
}

// Mean over `truth` points of the squared distance to the nearest `deformed`
// point. Asymmetric: only truth points are matched.
inline double chamfer_error(const PointCloud& deformed, const PointCloud& truth) {
  if (deformed.empty() || truth.empty()) throw std::invalid_argument("chamfer_error: empty cloud");
  if (deformed.dim() != truth.dim())
    throw std::invalid_argument("chamfer_error: dimension mismatch");
  double sum = 0.0;
  for (Eigen::Index n = 0; n < truth.size(); ++n) {
    sum += (deformed.points.rowwise() - truth.points.row(n)).rowwise().squaredNorm().minCoeff();
  }
  return sum / static_cast<double>(truth.size());
}

// Voxel grid filter: one output point per occupied cell, the centroid of the
// cell's members. Output order is the first-occurrence order of cells.
inline PointCloud voxel_downsample(const PointCloud& cloud, double leaf) {
  if (!(leaf > 0.0)) throw std::invalid_argument("voxel_downsample: leaf must be positive");
  if (cloud.empty()) return cloud;

  const int d = cloud.dim();
  std::map<std::vector<std::int64_t>, int> cell_index;
  std::vector<Eigen::VectorXd> sums;
  std::vector<int> counts;

  std::vector<std::int64_t> key(d);
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    for (int k = 0; k < d; ++k)
      key[k] = static_cast<std::int64_t>(std::floor(cloud.points(i, k) / leaf));
    auto [it, inserted] = cell_index.try_emplace(key, static_cast<int>(sums.size()));
    if (inserted) {
      sums.push_back(cloud.points.row(i).transpose());
      counts.push_back(1);
    } else {
      sums[it->second] += cloud.points.row(i).transpose();
      ++counts[it->second];
    }
  }

  PointCloud out;
  out.points.resize(static_cast<Eigen::Index>(sums.size()), d);
  for (std::size_t c = 0; c < sums.size(); ++c)
    out.points.row(static_cast<Eigen::Index>(c)) = (sums[c] / counts[c]).transpose();
  return out;
}

}  // namespace clsreg
