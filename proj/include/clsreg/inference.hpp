#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clsreg/cpd.hpp"
#include "clsreg/geometry.hpp"
#include "clsreg/shape_space.hpp"

namespace clsreg {

struct LatentPose {
  Eigen::VectorXd x;
  RigidTransform theta = RigidTransform::identity();
};

// Fit direction for the observation energy. ObservedAsData treats observed
// points as data under the deformed-canonical mixture (negative exponent,
// outer sum over observed points), which handles occlusion: unobserved
// canonical points cost nothing. LiteralEq12 keeps the printed form (positive
// exponent, outer sum over canonical points) for comparison runs.
enum class EnergyDirection { ObservedAsData, LiteralEq12 };

struct InferenceConfig {
  double sigma2 = 0.0;  // <= 0 selects (0.05 * canonical bbox diagonal)^2
  int max_iterations = 200;
  double gradient_tolerance = 1e-6;
  double initial_step = 1.0;
  double armijo_c = 1e-4;
  double backtrack = 0.5;
  double min_step = 1e-14;
  EnergyDirection direction = EnergyDirection::ObservedAsData;
  // Optional coarse-to-fine variance multipliers, e.g. {25, 5, 1}; empty runs
  // a single stage at sigma2. Iterations split evenly across stages.
  std::vector<double> sigma2_schedule;

  void validate() const {
    if (max_iterations < 1) throw std::invalid_argument("infer: max_iterations must be >= 1");
    if (!(gradient_tolerance > 0.0)) throw std::invalid_argument("infer: tolerance must be > 0");
    if (!(initial_step > 0.0) || !(backtrack > 0.0) || backtrack >= 1.0)
      throw std::invalid_argument("infer: bad line-search constants");
    for (double m : sigma2_schedule)
      if (!(m > 0.0)) throw std::invalid_argument("infer: schedule multipliers must be > 0");
  }
};

inline double resolve_sigma2(const CategoryModel& model, const InferenceConfig& cfg) {
  if (cfg.sigma2 > 0.0) return cfg.sigma2;
  const double diag = bbox_diagonal(model.canonical);
  return (0.05 * diag) * (0.05 * diag);
}

struct InferenceResult {
  LatentPose pose;
  PointCloud deformed;  // completed shape, occluded regions included
  DeformationField field;
  std::vector<double> energy_trace;
  bool converged = false;
  bool stalled = false;  // line search exhausted before the tolerance was met
  int iterations = 0;
  double final_gradient_norm = 0.0;
  double max_quat_defect = 0.0;  // worst |norm-1| seen before re-normalization
};

namespace detail {

// Deformed-then-posed canonical: rows are Theta(C_m + (G W)_m).
inline Eigen::MatrixXd posed_template(const CategoryModel& model, const Eigen::MatrixXd& kernel,
                                      const LatentPose& pose) {
  const Eigen::VectorXd y =
      destandardize(model.basis * pose.x, model.feature_means, model.feature_scales);
  const Eigen::MatrixXd w = unflatten_weights(y, model.canonical.size(), model.canonical.dim());
  Eigen::MatrixXd t = model.canonical.points + kernel * w;
  const Eigen::Matrix3d r = pose.theta.rotation.toRotationMatrix();
  return (t * r.transpose()).rowwise() + pose.theta.translation.transpose();
}

inline double energy_from_points(const Eigen::MatrixXd& posed, const Eigen::MatrixXd& observed,
                                 double sigma2, EnergyDirection direction) {
  const Eigen::Index m = posed.rows();
  const Eigen::Index n = observed.rows();
  const double inv = 1.0 / (2.0 * sigma2);
  double e = 0.0;
  if (direction == EnergyDirection::ObservedAsData) {
    Eigen::VectorXd d2(m);
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index i = 0; i < m; ++i) d2(i) = (observed.row(j) - posed.row(i)).squaredNorm();
      const double lo = d2.minCoeff();
      double s = 0.0;
      for (Eigen::Index i = 0; i < m; ++i) s += std::exp(-(d2(i) - lo) * inv);
      e -= std::log(s) - lo * inv;
    }
  } else {
    Eigen::VectorXd d2(n);
    for (Eigen::Index i = 0; i < m; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) d2(j) = (observed.row(j) - posed.row(i)).squaredNorm();
      const double hi = d2.maxCoeff();
      double s = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) s += std::exp((d2(j) - hi) * inv);
      e -= std::log(s) + hi * inv;
    }
  }
  return e;
}

}  // namespace detail

inline double inference_energy(const CategoryModel& model, const PointCloud& observation,
                               const LatentPose& pose, double sigma2,
                               EnergyDirection direction = EnergyDirection::ObservedAsData) {
  if (observation.empty()) throw std::invalid_argument("inference_energy: empty observation");
  if (observation.dim() != model.canonical.dim())
    throw std::invalid_argument("inference_energy: dimension mismatch");
  if (pose.x.size() != model.latent_dim)
    throw std::invalid_argument("inference_energy: latent size mismatch");
  if (!(sigma2 > 0.0)) throw std::invalid_argument("inference_energy: sigma2 must be > 0");
  const Eigen::MatrixXd kernel =
      gaussian_kernel(model.canonical, model.canonical, model.beta);
  const double e = detail::energy_from_points(detail::posed_template(model, kernel, pose),
                                              observation.points, sigma2, direction);
  if (!std::isfinite(e)) throw std::runtime_error("inference_energy: non-finite energy");
  return e;
}

struct EnergyGradient {
  double energy = 0.0;
  Eigen::VectorXd dx;       // q
  Eigen::Vector3d drot;     // rotation tangent (left-multiplied axis-angle)
  Eigen::Vector3d dtrans;   // translation
  double norm() const {
    return std::sqrt(dx.squaredNorm() + drot.squaredNorm() + dtrans.squaredNorm());
  }
};

namespace detail {

// Energy and analytic gradient sharing one pass over the M x N distances.
// Writing r_m for the posed template rows, both directions reduce to
// g_m = sign / sigma2 * sum_n weight_mn (r_m - O_n), with soft-assignment
// weights normalized per observed point (default) or per canonical point
// (literal form, where the positive exponent flips the sign).
inline EnergyGradient energy_gradient_impl(const CategoryModel& model,
                                           const Eigen::MatrixXd& kernel,
                                           const Eigen::MatrixXd& observed,
                                           const LatentPose& pose, double sigma2,
                                           EnergyDirection direction) {
  const Eigen::Index m = model.canonical.size();
  const Eigen::Index n = observed.rows();
  const double inv = 1.0 / (2.0 * sigma2);

  const Eigen::VectorXd y =
      destandardize(model.basis * pose.x, model.feature_means, model.feature_scales);
  const Eigen::MatrixXd w = unflatten_weights(y, m, model.canonical.dim());
  const Eigen::MatrixXd deformed = model.canonical.points + kernel * w;  // T, before pose
  const Eigen::Matrix3d r = pose.theta.rotation.toRotationMatrix();
  const Eigen::MatrixXd rotated = deformed * r.transpose();  // R T_m, before translation
  const Eigen::MatrixXd posed = rotated.rowwise() + pose.theta.translation.transpose();

  EnergyGradient g;
  Eigen::MatrixXd point_grad = Eigen::MatrixXd::Zero(m, 3);  // dE/dr_m rows
  if (direction == EnergyDirection::ObservedAsData) {
    Eigen::VectorXd d2(m);
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index i = 0; i < m; ++i) d2(i) = (observed.row(j) - posed.row(i)).squaredNorm();
      const double lo = d2.minCoeff();
      double s = 0.0;
      for (Eigen::Index i = 0; i < m; ++i) {
        d2(i) = std::exp(-(d2(i) - lo) * inv);
        s += d2(i);
      }
      g.energy -= std::log(s) - lo * inv;
      for (Eigen::Index i = 0; i < m; ++i) {
        const double a = d2(i) / s;
        if (a > 0.0) point_grad.row(i) += (a / sigma2) * (posed.row(i) - observed.row(j));
      }
    }
  } else {
    Eigen::VectorXd d2(n);
    for (Eigen::Index i = 0; i < m; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) d2(j) = (observed.row(j) - posed.row(i)).squaredNorm();
      const double hi = d2.maxCoeff();
      double s = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        d2(j) = std::exp((d2(j) - hi) * inv);
        s += d2(j);
      }
      g.energy -= std::log(s) + hi * inv;
      for (Eigen::Index j = 0; j < n; ++j) {
        const double b = d2(j) / s;
        if (b > 0.0) point_grad.row(i) -= (b / sigma2) * (posed.row(i) - observed.row(j));
      }
    }
  }

  g.dtrans = point_grad.colwise().sum().transpose();
  g.drot.setZero();
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::Vector3d v = rotated.row(i).transpose();
    const Eigen::Vector3d pg = point_grad.row(i).transpose();
    g.drot += v.cross(pg);
  }
  // dE/dW = G (point_grad R); then back through the linear decode.
  const Eigen::MatrixXd w_grad = kernel * (point_grad * r);
  const Eigen::VectorXd y_grad = flatten_weights(w_grad).cwiseProduct(model.feature_scales);
  g.dx = model.basis.transpose() * y_grad;
  return g;
}

}  // namespace detail

inline EnergyGradient energy_gradient(const CategoryModel& model, const PointCloud& observation,
                                      const LatentPose& pose, double sigma2,
                                      EnergyDirection direction = EnergyDirection::ObservedAsData) {
  if (observation.empty()) throw std::invalid_argument("energy_gradient: empty observation");
  if (pose.x.size() != model.latent_dim)
    throw std::invalid_argument("energy_gradient: latent size mismatch");
  if (!(sigma2 > 0.0)) throw std::invalid_argument("energy_gradient: sigma2 must be > 0");
  const Eigen::MatrixXd kernel = gaussian_kernel(model.canonical, model.canonical, model.beta);
  return detail::energy_gradient_impl(model, kernel, observation.points, pose, sigma2, direction);
}

namespace detail {
inline Eigen::Quaterniond apply_rotation_step(const Eigen::Quaterniond& q,
                                              const Eigen::Vector3d& delta,
                                              double* defect = nullptr) {
  const double angle = delta.norm();
  Eigen::Quaterniond step = Eigen::Quaterniond::Identity();
  if (angle > 0.0) step = Eigen::Quaterniond(Eigen::AngleAxisd(angle, delta / angle));
  Eigen::Quaterniond out = step * q;
  if (defect) *defect = std::max(*defect, std::abs(out.norm() - 1.0));
  return out.normalized();
}
}  // namespace detail

inline LatentPose default_init(const CategoryModel& model) {
  LatentPose p;
  p.x = Eigen::VectorXd::Zero(model.latent_dim);
  p.theta = RigidTransform::identity();
  return p;
}

// Gradient descent with Armijo backtracking over (x, rotation tangent,
// translation). Non-convergence is reported in the result, never thrown.
inline InferenceResult infer(const CategoryModel& model, const PointCloud& observation,
                             const InferenceConfig& cfg, const LatentPose& init) {
  cfg.validate();
  if (observation.empty()) throw std::invalid_argument("infer: empty observation");
  if (observation.dim() != model.canonical.dim())
    throw std::invalid_argument("infer: dimension mismatch");
  if (init.x.size() != model.latent_dim) throw std::invalid_argument("infer: bad init latent size");

  const Eigen::MatrixXd kernel = gaussian_kernel(model.canonical, model.canonical, model.beta);
  const double base_sigma2 = resolve_sigma2(model, cfg);

  std::vector<double> stages = cfg.sigma2_schedule;
  if (stages.empty()) stages = {1.0};
  const int per_stage =
      std::max(1, cfg.max_iterations / static_cast<int>(stages.size()));

  InferenceResult result;
  result.pose = init;
  result.pose.theta.rotation.normalize();

  double step = cfg.initial_step;
  for (std::size_t stage = 0; stage < stages.size(); ++stage) {
    const double sigma2 = stages[stage] * base_sigma2;
    const bool last_stage = stage + 1 == stages.size();
    EnergyGradient g = detail::energy_gradient_impl(model, kernel, observation.points,
                                                    result.pose, sigma2, cfg.direction);
    if (!std::isfinite(g.energy))
      throw std::runtime_error("infer: non-finite energy at stage " + std::to_string(stage));
    result.energy_trace.push_back(g.energy);

    for (int iter = 0; iter < per_stage; ++iter) {
      result.final_gradient_norm = g.norm();
      if (result.final_gradient_norm < cfg.gradient_tolerance) {
        if (last_stage) result.converged = true;
        break;
      }

      const double g2 = g.dx.squaredNorm() + g.drot.squaredNorm() + g.dtrans.squaredNorm();
      bool accepted = false;
      double trial_step = step;
      LatentPose candidate;
      EnergyGradient next;
      while (trial_step >= cfg.min_step) {
        candidate.x = result.pose.x - trial_step * g.dx;
        candidate.theta.translation = result.pose.theta.translation - trial_step * g.dtrans;
        candidate.theta.rotation = detail::apply_rotation_step(
            result.pose.theta.rotation, -trial_step * g.drot, &result.max_quat_defect);
        next = detail::energy_gradient_impl(model, kernel, observation.points, candidate, sigma2,
                                            cfg.direction);
        if (std::isfinite(next.energy) &&
            next.energy <= g.energy - cfg.armijo_c * trial_step * g2) {
          accepted = true;
          break;
        }
        trial_step *= cfg.backtrack;
      }
      if (!accepted) {
        // No descent step representable: numerically stationary.
        result.stalled = true;
        if (last_stage) result.converged = result.final_gradient_norm < 1e3 * cfg.gradient_tolerance;
        break;
      }
      result.pose = candidate;
      result.energy_trace.push_back(next.energy);
      ++result.iterations;
      g = next;
      // Grow the accepted step cautiously so the next search starts near it.
      step = std::min(trial_step * 2.0, cfg.initial_step);
    }
  }

  result.field = decode(model, result.pose.x);
  PointCloud deformed = apply_deformation(result.field, model.canonical);
  result.deformed = apply_rigid(deformed, result.pose.theta);
  return result;
}

inline InferenceResult infer(const CategoryModel& model, const PointCloud& observation,
                             const InferenceConfig& cfg = {}) {
  return infer(model, observation, cfg, default_init(model));
}

// Deformed canonical at a chosen resolution. Densification interpolates new
// canonical points between neighbors before pushing them through the dense
// field, so it needs no mesh and no randomness.
inline PointCloud complete_shape(const InferenceResult& result, Eigen::Index densify = 0) {
  const PointCloud& canonical = result.field.template_cloud;
  const Eigen::Index m = canonical.size();
  if (densify <= 0 || densify == m) return result.deformed;

  PointCloud sampled;
  if (densify < m) {
    sampled.points.resize(densify, canonical.dim());
    for (Eigen::Index i = 0; i < densify; ++i)
      sampled.points.row(i) = canonical.points.row(i * m / densify);
  } else {
    sampled.points.resize(densify, canonical.dim());
    sampled.points.topRows(m) = canonical.points;
    // Nearest neighbor per canonical point, precomputed once.
    std::vector<Eigen::Index> nearest(m, 0);
    for (Eigen::Index i = 0; i < m; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < m; ++j) {
        if (j == i) continue;
        const double d = (canonical.points.row(i) - canonical.points.row(j)).squaredNorm();
        if (d < best) {
          best = d;
          nearest[i] = j;
        }
      }
    }
    const double golden = 0.6180339887498949;
    for (Eigen::Index e = 0; e < densify - m; ++e) {
      const Eigen::Index i = e % m;
      const double alpha = std::fmod(golden * static_cast<double>(e + 1), 1.0);
      sampled.points.row(m + e) = (1.0 - alpha) * canonical.points.row(i) +
                                  alpha * canonical.points.row(nearest[i]);
    }
  }
  return apply_rigid(apply_deformation(result.field, sampled), result.pose.theta);
}

inline json inference_result_to_json(const InferenceResult& result) {
  json x = json::array();
  for (Eigen::Index i = 0; i < result.pose.x.size(); ++i) x.push_back(result.pose.x(i));
  json trace = json::array();
  for (double e : result.energy_trace) trace.push_back(e);
  return {{"x", x},
          {"theta", transform_to_json(result.pose.theta)},
          {"energy_trace", trace},
          {"converged", result.converged},
          {"iterations", result.iterations},
          {"final_gradient_norm", result.final_gradient_norm}};
}

}  // namespace clsreg
