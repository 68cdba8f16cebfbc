#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "clsreg/geometry.hpp"
#include "clsreg/rng.hpp"

namespace clsreg {

// Displaces every point by factor * (standard-normal D-vector).
inline PointCloud add_noise(const PointCloud& cloud, double factor, std::uint64_t seed) {
  if (factor < 0.0) throw std::invalid_argument("add_noise: factor must be non-negative");
  PointCloud out = cloud;
  if (factor == 0.0) return out;
  Rng rng(seed);
  for (Eigen::Index i = 0; i < out.size(); ++i)
    for (int k = 0; k < out.dim(); ++k) out.points(i, k) += factor * rng.normal();
  return out;
}

// Random rigid perturbation: translation = factor * uniform unit vector,
// rotation = given angle about a uniform random axis.
inline RigidTransform sample_misalignment(double translation_factor, double angle,
                                          std::uint64_t seed) {
  Rng rng(seed);
  RigidTransform t = RigidTransform::identity();
  if (translation_factor != 0.0) {
    const Eigen::VectorXd dir = rng.unit_vector(3);
    t.translation = translation_factor * Eigen::Vector3d(dir(0), dir(1), dir(2));
  }
  if (angle != 0.0) {
    const Eigen::VectorXd axis = rng.unit_vector(3);
    t.rotation = Eigen::Quaterniond(
        Eigen::AngleAxisd(angle, Eigen::Vector3d(axis(0), axis(1), axis(2))));
  }
  return t;
}

namespace detail {

// Outward normal estimates from k-nearest-neighbor PCA. The sign is fixed
// away from the cloud centroid; when that is ambiguous (planar point, offset
// nearly in-plane) the normal is left aligned with `toward` so the caller's
// visibility test keeps the point.
inline Eigen::MatrixXd estimate_outward_normals(const PointCloud& cloud, int k,
                                                const Eigen::VectorXd& toward) {
  const Eigen::Index n = cloud.size();
  const int d = cloud.dim();
  Eigen::MatrixXd normals(n, d);
  const Eigen::RowVectorXd centroid = cloud.points.colwise().mean();
  const int kk = static_cast<int>(std::min<Eigen::Index>(k, n - 1));
  std::vector<std::pair<double, Eigen::Index>> dist(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j)
      dist[j] = {(cloud.points.row(j) - cloud.points.row(i)).squaredNorm(), j};
    std::nth_element(dist.begin(), dist.begin() + kk, dist.end());
    // Neighborhood covariance including the point itself.
    Eigen::MatrixXd nbr(kk + 1, d);
    nbr.row(0) = cloud.points.row(i);
    // nth_element leaves the kk smallest (excluding self at distance 0 in some slot)
    // unordered in the front; self is among them, so collect distinct rows.
    int written = 1;
    for (int s = 0; s <= kk && written <= kk; ++s) {
      if (dist[s].second == i) continue;
      nbr.row(written++) = cloud.points.row(dist[s].second);
    }
    while (written <= kk) nbr.row(written++) = cloud.points.row(i);
    const Eigen::RowVectorXd mu = nbr.colwise().mean();
    const Eigen::MatrixXd centered = nbr.rowwise() - mu;
    const Eigen::MatrixXd cov = centered.transpose() * centered;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    Eigen::VectorXd nrm = eig.eigenvectors().col(0);  // smallest eigenvalue
    const Eigen::VectorXd offset = (cloud.points.row(i) - centroid).transpose();
    const double s = nrm.dot(offset);
    const double ambiguous = 1e-9 * std::max(1.0, offset.norm());
    if (std::abs(s) <= ambiguous) {
      if (nrm.dot(toward) < 0.0) nrm = -nrm;
    } else if (s < 0.0) {
      nrm = -nrm;
    }
    normals.row(i) = nrm.transpose();
  }
  return normals;
}

}  // namespace detail

// Indices of points visible from the given direction (vector pointing from
// the object toward the viewer). A point is kept iff its outward normal is
// within 95 degrees of the view direction.
inline std::vector<Eigen::Index> partial_view_indices(const PointCloud& cloud,
                                                      const Eigen::VectorXd& view_direction,
                                                      int neighbors = 12) {
  if (cloud.empty()) throw std::invalid_argument("partial_view: empty cloud");
  if (view_direction.size() != cloud.dim())
    throw std::invalid_argument("partial_view: dimension mismatch");
  const double vn = view_direction.norm();
  if (vn < 1e-12) throw std::invalid_argument("partial_view: zero view direction");
  const Eigen::VectorXd v = view_direction / vn;

  if (cloud.size() == 1) return {0};

  const Eigen::MatrixXd normals = detail::estimate_outward_normals(cloud, neighbors, v);
  const double threshold = std::cos(95.0 * M_PI / 180.0);
  std::vector<Eigen::Index> kept;
  for (Eigen::Index i = 0; i < cloud.size(); ++i)
    if (normals.row(i).dot(v) >= threshold) kept.push_back(i);
  if (kept.empty()) throw std::runtime_error("partial_view: no points visible from this direction");
  return kept;
}

inline PointCloud partial_view(const PointCloud& cloud, const Eigen::VectorXd& view_direction,
                               int neighbors = 12) {
  const auto idx = partial_view_indices(cloud, view_direction, neighbors);
  PointCloud out;
  out.points.resize(static_cast<Eigen::Index>(idx.size()), cloud.dim());
  for (std::size_t i = 0; i < idx.size(); ++i) out.points.row(static_cast<Eigen::Index>(i)) = cloud.points.row(idx[i]);
  return out;
}

}  // namespace clsreg
