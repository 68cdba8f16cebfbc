#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "clsreg/geometry.hpp"
#include "clsreg/io.hpp"

namespace clsreg {

// Raised when an iterative fit exhausts its budget and the caller did not
// opt into accepting partial results.
struct NonConvergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CpdConfig {
  double beta = 1.0;     // kernel width, model units
  double lambda = 3.0;   // coherence weight
  double omega = 0.1;    // outlier mass, [0,1)
  int max_iterations = 150;
  double tolerance = 1e-6;  // relative energy change to keep iterating
  // Variance collapse implies the registration has pinned every reference
  // point; continuing makes the M-step system needlessly stiff.
  double sigma2_stop = 1e-9;

  void validate() const {
    if (!(beta > 0.0)) throw std::invalid_argument("cpd: beta must be > 0");
    if (lambda < 0.0) throw std::invalid_argument("cpd: lambda must be >= 0");
    if (omega < 0.0 || omega >= 1.0) throw std::invalid_argument("cpd: omega must be in [0,1)");
    if (max_iterations < 1) throw std::invalid_argument("cpd: max_iterations must be >= 1");
  }
};

// Non-rigid map T(Z) = Z + G(Z, template) W, defined for arbitrary query
// points, not only the template.
struct DeformationField {
  PointCloud template_cloud;
  double beta = 1.0;
  Eigen::MatrixXd weights;  // M x D
};

inline Eigen::MatrixXd gaussian_kernel(const PointCloud& a, const PointCloud& b, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("gaussian_kernel: beta must be > 0");
  if (a.dim() != b.dim()) throw std::invalid_argument("gaussian_kernel: dimension mismatch");
  Eigen::MatrixXd g(a.size(), b.size());
  const double inv = 1.0 / (2.0 * beta * beta);
  for (Eigen::Index i = 0; i < a.size(); ++i)
    for (Eigen::Index j = 0; j < b.size(); ++j)
      g(i, j) = std::exp(-(a.points.row(i) - b.points.row(j)).squaredNorm() * inv);
  return g;
}

// Posterior responsibilities p_mn of template centroid m for reference point n,
// with a uniform outlier component carrying mass (omega/(1-omega)) (2 pi s2)^{D/2} / N
// in every column's denominator. Column m-sums are <= 1; the remainder is the
// outlier posterior. A column whose Gaussian terms all underflow goes fully to
// the outlier (all zeros).
inline Eigen::MatrixXd e_step(const PointCloud& template_deformed, const PointCloud& reference,
                              double sigma2, double omega,
                              Eigen::VectorXd* outlier_posterior = nullptr) {
  if (!(sigma2 > 0.0)) throw std::invalid_argument("e_step: sigma2 must be > 0");
  if (template_deformed.dim() != reference.dim())
    throw std::invalid_argument("e_step: dimension mismatch");
  const Eigen::Index m = template_deformed.size();
  const Eigen::Index n = reference.size();
  const int d = reference.dim();
  const double c = omega > 0.0
                       ? (omega / (1.0 - omega)) *
                             std::pow(2.0 * M_PI * sigma2, 0.5 * d) / static_cast<double>(n)
                       : 0.0;
  Eigen::MatrixXd p(m, n);
  if (outlier_posterior) outlier_posterior->setZero(n);
  Eigen::VectorXd d2(m);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < m; ++i)
      d2(i) = (reference.points.row(j) - template_deformed.points.row(i)).squaredNorm();
    const double shift = d2.minCoeff();
    double denom = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
      p(i, j) = std::exp(-(d2(i) - shift) / (2.0 * sigma2));
      denom += p(i, j);
    }
    // The outlier constant re-scaled into the shifted frame. Overflow of the
    // scale factor means the Gaussian mass is negligible against the outlier.
    const double scaled_c = c * std::exp(shift / (2.0 * sigma2));
    if (!std::isfinite(scaled_c)) {
      p.col(j).setZero();
      if (outlier_posterior) (*outlier_posterior)(j) = 1.0;
      continue;
    }
    p.col(j) /= (denom + scaled_c);
    if (outlier_posterior) (*outlier_posterior)(j) = scaled_c / (denom + scaled_c);
  }
  return p;
}

namespace detail {
// Residual of the coherence-regularized normal equations in their stated
// form, (G + lambda s2 d(P1)^{-1}) W = d(P1)^{-1} P R - T.
inline double mstep_residual(const Eigen::MatrixXd& G, const Eigen::VectorXd& p1_inv,
                             double lambda_s2, const Eigen::MatrixXd& W,
                             const Eigen::MatrixXd& rhs) {
  const Eigen::MatrixXd lhs =
      G * W + lambda_s2 * (p1_inv.asDiagonal() * W);
  return (lhs - rhs).norm();
}
}  // namespace detail

// Solves (G + lambda sigma2 d(P1)^{-1}) W = d(P1)^{-1} P S^[r] - S^[t].
// A template point with no responsibility gets its row sum clamped to eps so
// the system stays definite; regularized_rows counts them when provided.
inline Eigen::MatrixXd m_step(const PointCloud& template_cloud, const PointCloud& reference,
                              const Eigen::MatrixXd& G, const Eigen::MatrixXd& P, double sigma2,
                              double lambda, int* regularized_rows = nullptr,
                              double* residual_out = nullptr) {
  const Eigen::Index m = template_cloud.size();
  if (G.rows() != m || G.cols() != m) throw std::invalid_argument("m_step: kernel shape mismatch");
  if (P.rows() != m || P.cols() != reference.size())
    throw std::invalid_argument("m_step: posterior shape mismatch");

  Eigen::VectorXd p1 = P.rowwise().sum();
  int clamped = 0;
  for (Eigen::Index i = 0; i < m; ++i)
    if (p1(i) < 1e-12) {
      p1(i) = 1e-12;
      ++clamped;
    }
  if (regularized_rows) *regularized_rows = clamped;

  const Eigen::VectorXd p1_inv = p1.cwiseInverse();
  const double lambda_s2 = lambda * sigma2;
  Eigen::MatrixXd A = G;
  A.diagonal() += lambda_s2 * p1_inv;
  const Eigen::MatrixXd rhs =
      p1_inv.asDiagonal() * (P * reference.points) - template_cloud.points;

  Eigen::LDLT<Eigen::MatrixXd> solver(A);
  Eigen::MatrixXd W = solver.solve(rhs);
  // One or two refinement passes push the residual to solver-noise level even
  // when the kernel is nearly rank-deficient.
  for (int pass = 0; pass < 3; ++pass) {
    const Eigen::MatrixXd r = rhs - (G * W + lambda_s2 * (p1_inv.asDiagonal() * W));
    if (r.norm() < 1e-11) break;
    W += solver.solve(r);
  }
  if (residual_out) *residual_out = detail::mstep_residual(G, p1_inv, lambda_s2, W, rhs);
  return W;
}

// Standard CPD variance re-estimate, floored to stay usable as a divisor.
inline double update_sigma2(const PointCloud& template_deformed, const PointCloud& reference,
                            const Eigen::MatrixXd& P) {
  const int d = reference.dim();
  double num = 0.0;
  double den = 0.0;
  for (Eigen::Index i = 0; i < P.rows(); ++i)
    for (Eigen::Index j = 0; j < P.cols(); ++j) {
      const double w = P(i, j);
      if (w == 0.0) continue;
      num += w * (reference.points.row(j) - template_deformed.points.row(i)).squaredNorm();
      den += w;
    }
  if (den <= 0.0) return 1e-10;
  return std::max(num / (d * den), 1e-10);
}

// Negative log-likelihood of the reference under the centroid mixture
// (constants dropped) plus the coherence penalty (lambda/2) tr(W' G W).
inline double cpd_energy(const PointCloud& template_deformed, const PointCloud& reference,
                         double sigma2, double lambda, const Eigen::MatrixXd& W,
                         const Eigen::MatrixXd& G) {
  const Eigen::Index m = template_deformed.size();
  double nll = 0.0;
  Eigen::VectorXd d2(m);
  for (Eigen::Index j = 0; j < reference.size(); ++j) {
    for (Eigen::Index i = 0; i < m; ++i)
      d2(i) = (reference.points.row(j) - template_deformed.points.row(i)).squaredNorm();
    const double shift = d2.minCoeff();
    double s = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) s += std::exp(-(d2(i) - shift) / (2.0 * sigma2));
    nll -= std::log(s) - shift / (2.0 * sigma2);
  }
  const double reg = 0.5 * lambda * (W.transpose() * G * W).trace();
  return nll + reg;
}

struct CpdResult {
  DeformationField field;
  int iterations = 0;
  bool converged = false;
  double final_energy = 0.0;
  double final_sigma2 = 0.0;
  // Worst values seen across all iterations, for verification.
  double max_mstep_residual = 0.0;
  double max_colsum_error = 0.0;
  int regularized_rows = 0;
};

// EM loop: responsibilities, coherent weight solve, variance update, until the
// energy stalls, the variance collapses, or the iteration budget runs out.
inline CpdResult cpd_register(const PointCloud& template_cloud, const PointCloud& reference,
                              const CpdConfig& cfg) {
  cfg.validate();
  if (template_cloud.empty() || reference.empty())
    throw std::invalid_argument("cpd_register: empty cloud");
  if (template_cloud.dim() != reference.dim())
    throw std::invalid_argument("cpd_register: dimension mismatch");

  const Eigen::Index m = template_cloud.size();
  const Eigen::Index n = reference.size();
  const int d = reference.dim();

  const Eigen::MatrixXd G = gaussian_kernel(template_cloud, template_cloud, cfg.beta);

  double sigma2 = 0.0;
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      sigma2 += (reference.points.row(j) - template_cloud.points.row(i)).squaredNorm();
  sigma2 /= static_cast<double>(d) * static_cast<double>(m) * static_cast<double>(n);
  sigma2 = std::max(sigma2, 1e-10);

  CpdResult result;
  result.field.template_cloud = template_cloud;
  result.field.beta = cfg.beta;
  result.field.weights = Eigen::MatrixXd::Zero(m, d);

  PointCloud deformed = template_cloud;
  double energy = cpd_energy(deformed, reference, sigma2, cfg.lambda, result.field.weights, G);

  Eigen::VectorXd outlier;
  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    const Eigen::MatrixXd P = e_step(deformed, reference, sigma2, cfg.omega, &outlier);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double defect = std::abs(P.col(j).sum() + outlier(j) - 1.0);
      result.max_colsum_error = std::max(result.max_colsum_error, defect);
    }

    int clamped = 0;
    double residual = 0.0;
    result.field.weights =
        m_step(template_cloud, reference, G, P, sigma2, cfg.lambda, &clamped, &residual);
    result.regularized_rows += clamped;
    result.max_mstep_residual = std::max(result.max_mstep_residual, residual);

    deformed.points = template_cloud.points + G * result.field.weights;
    sigma2 = update_sigma2(deformed, reference, P);

    const double next = cpd_energy(deformed, reference, sigma2, cfg.lambda, result.field.weights, G);
    if (!std::isfinite(next))
      throw std::runtime_error("cpd_register: energy diverged at iteration " +
                               std::to_string(iter));
    const double rel = std::abs(energy - next) / std::max(std::abs(energy), 1e-12);
    energy = next;
    result.iterations = iter + 1;
    if (rel < cfg.tolerance || sigma2 <= cfg.sigma2_stop) {
      result.converged = true;
      break;
    }
  }

  result.final_energy = energy;
  result.final_sigma2 = sigma2;
  return result;
}

// {beta, template: inline CSV text or a .ply/.csv file reference, weights: row-major}.
inline json field_to_json(const DeformationField& field) {
  json weights = json::array();
  for (Eigen::Index i = 0; i < field.weights.rows(); ++i)
    for (Eigen::Index k = 0; k < field.weights.cols(); ++k) weights.push_back(field.weights(i, k));
  return {{"beta", field.beta},
          {"template", cloud_to_csv_string(field.template_cloud)},
          {"weights", weights}};
}

inline DeformationField field_from_json(const json& j) {
  DeformationField field;
  field.beta = j.at("beta").get<double>();
  if (!(field.beta > 0.0)) throw ParseError("deformation field: beta must be > 0");
  const auto& tpl = j.at("template");
  if (!tpl.is_string()) throw ParseError("deformation field: template must be a string");
  const std::string text = tpl.get<std::string>();
  const bool file_ref = text.find('\n') == std::string::npos &&
                        (text.ends_with(".ply") || text.ends_with(".csv"));
  field.template_cloud = file_ref ? read_cloud(text) : cloud_from_csv_string(text);
  const auto& w = j.at("weights");
  if (!w.is_array()) throw ParseError("deformation field: weights must be an array");
  const Eigen::Index m = field.template_cloud.size();
  const Eigen::Index d = field.template_cloud.dim();
  if (static_cast<Eigen::Index>(w.size()) != m * d)
    throw ParseError("deformation field: weights size mismatch");
  field.weights.resize(m, d);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index k = 0; k < d; ++k)
      field.weights(i, k) = w[static_cast<std::size_t>(i * d + k)].get<double>();
  if (!field.weights.allFinite()) throw ParseError("deformation field: non-finite weights");
  return field;
}

inline PointCloud apply_deformation(const DeformationField& field, const PointCloud& z) {
  if (z.dim() != field.template_cloud.dim())
    throw std::invalid_argument("apply_deformation: dimension mismatch");
  if (field.weights.rows() != field.template_cloud.size() ||
      field.weights.cols() != field.template_cloud.dim())
    throw std::invalid_argument("apply_deformation: weights shape mismatch");
  PointCloud out = z;
  if (z.empty()) return out;
  const Eigen::MatrixXd K = gaussian_kernel(z, field.template_cloud, field.beta);
  out.points += K * field.weights;
  return out;
}

}  // namespace clsreg
