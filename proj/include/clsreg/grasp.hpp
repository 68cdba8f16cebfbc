#pragma once

#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clsreg/cpd.hpp"
#include "clsreg/geometry.hpp"
#include "clsreg/inference.hpp"
#include "clsreg/io.hpp"

namespace clsreg {

struct AnnotatedPose {
  std::string label;
  Pose pose;
  json meta = json::object();  // passed through untouched
};

struct GraspAnnotation {
  std::vector<AnnotatedPose> poses;

  void validate() const {
    std::set<std::string> seen;
    for (const auto& p : poses) {
      if (!seen.insert(p.label).second)
        throw std::invalid_argument("grasp annotation: duplicate label '" + p.label + "'");
      if (std::abs(p.pose.orientation.norm() - 1.0) > 1e-6)
        throw std::invalid_argument("grasp annotation: non-unit orientation for '" + p.label + "'");
    }
  }
};

struct WarpedGrasp {
  std::vector<AnnotatedPose> poses;
  LatentPose provenance;
  std::vector<std::string> warnings;  // per-pose degeneracy fallbacks
};

inline Eigen::Vector3d warp_position(const DeformationField& field, const RigidTransform& theta,
                                     const Eigen::Vector3d& pos) {
  PointCloud single;
  single.points.resize(1, 3);
  single.points.row(0) = pos.transpose();
  const PointCloud warped = apply_deformation(field, single);
  return theta.apply(warped.points.row(0).transpose());
}

// Orientation transport through the field: the pose's frame axes are pushed
// through as finite offsets at scale h, and the resulting frame is projected
// onto the nearest proper rotation before composing with the rigid part.
// Returns false when the warped frame collapses (rank < 3); the caller then
// falls back to the rigid-only rotation.
inline bool warp_orientation(const DeformationField& field, const RigidTransform& theta,
                             const Pose& pose, Eigen::Quaterniond* out) {
  // W = 0 must reproduce the rigid case bit-for-bit, not through an SVD.
  if (field.weights.isZero(0.0)) {
    *out = (theta.rotation * pose.orientation).normalized();
    return true;
  }

  const double h = 0.01 * bbox_diagonal(field.template_cloud);
  const Eigen::Matrix3d axes = pose.orientation.toRotationMatrix();

  PointCloud probes;
  probes.points.resize(4, 3);
  probes.points.row(0) = pose.position.transpose();
  for (int k = 0; k < 3; ++k)
    probes.points.row(k + 1) = (pose.position + h * axes.col(k)).transpose();
  const PointCloud warped = apply_deformation(field, probes);

  Eigen::Matrix3d frame;
  for (int k = 0; k < 3; ++k)
    frame.col(k) = (warped.points.row(k + 1) - warped.points.row(0)).transpose() / h;

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(frame, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const double smax = svd.singularValues()(0);
  const double smin = svd.singularValues()(2);
  if (smin < 1e-6 * std::max(smax, 1.0)) return false;

  Eigen::Matrix3d uv = svd.matrixU() * svd.matrixV().transpose();
  if (uv.determinant() < 0.0) {
    Eigen::Matrix3d flip = Eigen::Matrix3d::Identity();
    flip(2, 2) = -1.0;
    uv = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  *out = (theta.rotation * Eigen::Quaterniond(uv)).normalized();
  return true;
}

inline WarpedGrasp warp_grasp(const GraspAnnotation& annotation, const InferenceResult& result) {
  annotation.validate();
  WarpedGrasp out;
  out.provenance = result.pose;
  out.poses.reserve(annotation.poses.size());
  for (const auto& a : annotation.poses) {
    AnnotatedPose w = a;
    w.pose.position = warp_position(result.field, result.pose.theta, a.pose.position);
    Eigen::Quaterniond q;
    if (warp_orientation(result.field, result.pose.theta, a.pose, &q)) {
      w.pose.orientation = q;
    } else {
      w.pose.orientation = (result.pose.theta.rotation * a.pose.orientation).normalized();
      out.warnings.push_back("pose '" + a.label +
                             "': warped frame degenerate, rigid-only orientation used");
    }
    out.poses.push_back(std::move(w));
  }
  return out;
}

// ---- Annotation JSON ---------------------------------------------------------

inline json annotation_to_json(const GraspAnnotation& annotation) {
  json poses = json::array();
  for (const auto& p : annotation.poses) {
    json entry = pose_to_json(p.pose);
    entry["label"] = p.label;
    if (!p.meta.empty()) entry["meta"] = p.meta;
    poses.push_back(entry);
  }
  return {{"poses", poses}};
}

inline GraspAnnotation annotation_from_json(const json& j) {
  GraspAnnotation a;
  if (!j.contains("poses") || !j.at("poses").is_array())
    throw ParseError("grasp annotation: missing poses array");
  for (const auto& entry : j.at("poses")) {
    AnnotatedPose p;
    if (!entry.contains("label")) throw ParseError("grasp annotation: pose without label");
    p.label = entry.at("label").get<std::string>();
    p.pose = pose_from_json(entry);
    p.meta = entry.value("meta", json::object());
    a.poses.push_back(std::move(p));
  }
  a.validate();
  return a;
}

inline json warped_to_json(const WarpedGrasp& warped) {
  json poses = json::array();
  for (const auto& p : warped.poses) {
    json entry = pose_to_json(p.pose);
    entry["label"] = p.label;
    if (!p.meta.empty()) entry["meta"] = p.meta;
    poses.push_back(entry);
  }
  json x = json::array();
  for (Eigen::Index i = 0; i < warped.provenance.x.size(); ++i) x.push_back(warped.provenance.x(i));
  json out = {{"poses", poses},
              {"provenance", {{"x", x}, {"theta", transform_to_json(warped.provenance.theta)}}}};
  if (!warped.warnings.empty()) out["warnings"] = warped.warnings;
  return out;
}

}  // namespace clsreg
