#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "clsreg/cpd.hpp"
#include "clsreg/geometry.hpp"
#include "clsreg/io.hpp"
#include "clsreg/parallel.hpp"
#include "clsreg/rng.hpp"

namespace clsreg {

inline Eigen::VectorXd flatten_weights(const Eigen::MatrixXd& w) {
  Eigen::VectorXd y(w.size());
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) y(k++) = w(i, j);
  return y;
}

inline Eigen::MatrixXd unflatten_weights(const Eigen::VectorXd& y, Eigen::Index rows,
                                         Eigen::Index cols) {
  if (y.size() != rows * cols) throw std::invalid_argument("unflatten_weights: size mismatch");
  Eigen::MatrixXd w(rows, cols);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) w(i, j) = y(k++);
  return w;
}

// Column-standardized training features. Scales use the population variance;
// constant columns keep scale 1 and are listed in constant_columns.
struct DesignMatrix {
  Eigen::MatrixXd rows;            // n x p, standardized
  Eigen::VectorXd feature_means;   // p
  Eigen::VectorXd feature_scales;  // p
  std::vector<Eigen::Index> constant_columns;
};

inline DesignMatrix standardize(const Eigen::MatrixXd& raw) {
  if (raw.rows() < 2) throw std::invalid_argument("standardize: need at least 2 rows");
  const Eigen::Index n = raw.rows();
  const Eigen::Index p = raw.cols();
  DesignMatrix d;
  d.feature_means = raw.colwise().mean();
  d.feature_scales.resize(p);
  d.rows.resize(n, p);
  for (Eigen::Index j = 0; j < p; ++j) {
    const Eigen::VectorXd centered = raw.col(j).array() - d.feature_means(j);
    const double var = centered.squaredNorm() / static_cast<double>(n);
    double scale = std::sqrt(var);
    if (scale < 1e-15) {
      scale = 1.0;
      d.constant_columns.push_back(j);
    }
    d.feature_scales(j) = scale;
    d.rows.col(j) = centered / scale;
  }
  return d;
}

inline Eigen::VectorXd destandardize(const Eigen::VectorXd& standardized,
                                     const Eigen::VectorXd& means, const Eigen::VectorXd& scales) {
  if (standardized.size() != means.size() || means.size() != scales.size())
    throw std::invalid_argument("destandardize: size mismatch");
  return (standardized.array() * scales.array() + means.array()).matrix();
}

namespace detail {

// Largest principal angle between the column spans of two orthonormal bases.
inline double principal_angle(const Eigen::MatrixXd& q1, const Eigen::MatrixXd& q2) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(q1.transpose() * q2);
  const double smin = std::max(0.0, std::min(1.0, svd.singularValues().minCoeff()));
  return std::acos(smin);
}

inline Eigen::MatrixXd orthonormal_columns(const Eigen::MatrixXd& a) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(a.rows(), a.cols());
  return q;
}

inline Eigen::MatrixXd random_orthonormal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Eigen::MatrixXd a(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) a(i, j) = rng.normal();
  return orthonormal_columns(a);
}

}  // namespace detail

struct PcaEmOptions {
  int max_iterations = 5000;
  double tolerance = 1e-9;  // principal-angle change between iterations
  std::uint64_t seed = 0x70636165;
  int max_restarts = 5;
};

struct PcaEmResult {
  Eigen::MatrixXd basis;  // p x q_effective, orthonormal, principal order
  int effective_q = 0;    // q reduced to rank(Y) when Y is rank-deficient
  int iterations = 0;
  int restarts = 0;
  bool converged = false;
};

// Alternating least squares for the principal subspace:
//   X = Y L' (L L')^{-1},   L = (X' X)^{-1} X' Y     with L kept q x p.
// The fixed point spans the top-q subspace; the returned basis is the
// transposed, orthonormalized span rotated onto the principal axes of the
// projected data, columns sign-fixed by their largest-magnitude entry.
inline PcaEmResult pca_em(const Eigen::MatrixXd& y, int q, const PcaEmOptions& opt = {}) {
  const Eigen::Index n = y.rows();
  const Eigen::Index p = y.cols();
  if (q < 1) throw std::invalid_argument("pca_em: q must be >= 1");
  if (q > std::min<Eigen::Index>(n - 1, p))
    throw std::invalid_argument("pca_em: q exceeds min(n-1, p)");

  PcaEmResult result;

  // Rank guard: a rank-deficient Y cannot support q independent directions.
  Eigen::JacobiSVD<Eigen::MatrixXd> rank_svd(y);
  const Eigen::VectorXd& sv = rank_svd.singularValues();
  const double rank_tol = sv.size() ? sv(0) * std::max(n, p) * 1e-14 : 0.0;
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > rank_tol) ++rank;
  if (rank == 0) throw std::runtime_error("pca_em: design matrix is zero");
  const int qe = static_cast<int>(std::min<Eigen::Index>(q, rank));
  result.effective_q = qe;

  Rng rng(opt.seed);
  Eigen::MatrixXd l = detail::random_orthonormal(p, qe, rng).transpose();  // q x p
  Eigen::MatrixXd prev_q = detail::orthonormal_columns(l.transpose());

  for (int iter = 0; iter < opt.max_iterations; ++iter) {
    const Eigen::MatrixXd a = l * l.transpose();                 // q x q
    const Eigen::MatrixXd x = a.ldlt().solve(l * y.transpose()).transpose();  // n x q
    const Eigen::MatrixXd b = x.transpose() * x;                 // q x q
    Eigen::FullPivLU<Eigen::MatrixXd> lu(b);
    if (!lu.isInvertible()) {
      if (++result.restarts > opt.max_restarts)
        throw std::runtime_error("pca_em: repeated singular iterate");
      l = detail::random_orthonormal(p, qe, rng).transpose();
      prev_q = detail::orthonormal_columns(l.transpose());
      continue;
    }
    l = lu.solve(x.transpose() * y);  // q x p
    result.iterations = iter + 1;

    const Eigen::MatrixXd cur_q = detail::orthonormal_columns(l.transpose());
    const double angle = detail::principal_angle(prev_q, cur_q);
    prev_q = cur_q;
    if (angle < opt.tolerance) {
      result.converged = true;
      break;
    }
  }

  // Rotate the converged span onto principal axes of the projected data and
  // fix column signs deterministically.
  Eigen::MatrixXd qbasis = detail::orthonormal_columns(l.transpose());  // p x qe
  Eigen::JacobiSVD<Eigen::MatrixXd> proj_svd(y * qbasis, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Eigen::MatrixXd basis = qbasis * proj_svd.matrixV();
  for (Eigen::Index j = 0; j < basis.cols(); ++j) {
    Eigen::Index imax = 0;
    basis.col(j).cwiseAbs().maxCoeff(&imax);
    if (basis(imax, j) < 0.0) basis.col(j) = -basis.col(j);
  }
  result.basis = basis;
  return result;
}

// Smallest q whose leading singular values explain >= the required share of
// total variance.
inline int select_latent_dim(const Eigen::MatrixXd& y, double required = 0.95) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(y);
  const Eigen::VectorXd sv2 = svd.singularValues().array().square();
  const double total = sv2.sum();
  if (total <= 0.0) return 1;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < sv2.size(); ++i) {
    acc += sv2(i);
    if (acc / total >= required) return static_cast<int>(i) + 1;
  }
  return static_cast<int>(sv2.size());
}

inline double explained_variance(const Eigen::MatrixXd& y, int q) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(y);
  const Eigen::VectorXd sv2 = svd.singularValues().array().square();
  const double total = sv2.sum();
  if (total <= 0.0) return 1.0;
  return sv2.head(std::min<Eigen::Index>(q, sv2.size())).sum() / total;
}

struct TrainingSet {
  std::vector<PointCloud> instances;
  std::vector<std::string> labels;

  void validate() const {
    if (instances.size() < 2) throw std::invalid_argument("training set: need >= 2 instances");
    for (const auto& c : instances) {
      if (c.empty()) throw std::invalid_argument("training set: empty instance");
      if (c.dim() != instances.front().dim())
        throw std::invalid_argument("training set: mixed dimensions");
    }
    if (!labels.empty() && labels.size() != instances.size())
      throw std::invalid_argument("training set: label count mismatch");
  }

  std::string label(std::size_t i) const {
    return labels.empty() ? "instance " + std::to_string(i) : labels[i];
  }
};

struct CategoryModel {
  PointCloud canonical;            // M x D
  Eigen::MatrixXd basis;           // p x q, orthonormal columns
  int latent_dim = 0;              // q
  Eigen::VectorXd feature_means;   // p
  Eigen::VectorXd feature_scales;  // p
  double beta = 1.0;
  Eigen::MatrixXd training_latents;  // n x q
  double explained = 0.0;            // variance share captured by latent_dim
  json provenance = json::object();

  Eigen::Index feature_count() const { return canonical.size() * canonical.dim(); }
};

inline Eigen::VectorXd encode(const CategoryModel& model, const Eigen::VectorXd& y_standardized) {
  if (y_standardized.size() != model.basis.rows())
    throw std::invalid_argument("encode: feature length mismatch");
  return model.basis.transpose() * y_standardized;
}

inline DeformationField decode(const CategoryModel& model, const Eigen::VectorXd& x) {
  if (x.size() != model.latent_dim) throw std::invalid_argument("decode: latent length mismatch");
  const Eigen::VectorXd y = destandardize(model.basis * x, model.feature_means, model.feature_scales);
  DeformationField field;
  field.template_cloud = model.canonical;
  field.beta = model.beta;
  field.weights = unflatten_weights(y, model.canonical.size(), model.canonical.dim());
  return field;
}

struct SelectCanonicalResult {
  std::size_t index = 0;
  int registrations = 0;
  std::vector<double> total_energies;  // per candidate
};

// Every candidate is registered onto every other instance; the winner has the
// lowest summed final energy. n(n-1) registrations, ties to the lowest index.
inline SelectCanonicalResult select_canonical(const TrainingSet& training, const CpdConfig& cfg,
                                              int threads = 1) {
  training.validate();
  const std::size_t n = training.instances.size();
  SelectCanonicalResult result;
  result.total_energies.assign(n, 0.0);
  std::vector<double> pair_energy(n * n, 0.0);
  parallel_for(n * n, threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t k = begin; k < end; ++k) {
      const std::size_t c = k / n;
      const std::size_t j = k % n;
      if (j == c) continue;
      pair_energy[k] =
          cpd_register(training.instances[c], training.instances[j], cfg).final_energy;
    }
  });
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t j = 0; j < n; ++j) {
      if (j == c) continue;
      result.total_energies[c] += pair_energy[c * n + j];
      ++result.registrations;
    }
  for (std::size_t c = 1; c < n; ++c)
    if (result.total_energies[c] < result.total_energies[result.index]) result.index = c;
  return result;
}

struct TrainOptions {
  int canonical_index = -1;  // -1 selects automatically
  PcaEmOptions pca;
  double variance_required = 0.95;
  bool allow_nonconverged = false;
  int threads = 1;
};

struct TrainResult {
  CategoryModel model;
  std::size_t canonical_index = 0;
  std::vector<CpdResult> registrations;  // canonical -> instance i
  DesignMatrix design;
};

// Registration of the canonical onto every training instance (itself
// included; its near-zero weights are a real design row), standardization,
// dimensionality selection, PCA-EM.
inline TrainResult train_category(const TrainingSet& training, const CpdConfig& cfg,
                                  const TrainOptions& opt = {}) {
  training.validate();
  cfg.validate();
  const std::size_t n = training.instances.size();

  TrainResult result;
  if (opt.canonical_index >= 0) {
    if (static_cast<std::size_t>(opt.canonical_index) >= n)
      throw std::invalid_argument("train_category: canonical index out of range");
    result.canonical_index = static_cast<std::size_t>(opt.canonical_index);
  } else {
    result.canonical_index = select_canonical(training, cfg, opt.threads).index;
  }
  const PointCloud& canonical = training.instances[result.canonical_index];

  result.registrations.resize(n);
  std::vector<std::string> failures(n);
  parallel_for(n, opt.threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      try {
        result.registrations[i] = cpd_register(canonical, training.instances[i], cfg);
      } catch (const std::exception& e) {
        failures[i] = e.what();
      }
    }
  });
  for (std::size_t i = 0; i < n; ++i)
    if (!failures[i].empty())
      throw std::runtime_error("train_category: registration of " + training.label(i) +
                               " failed: " + failures[i]);
  for (std::size_t i = 0; i < n; ++i)
    if (!result.registrations[i].converged && !opt.allow_nonconverged)
      throw NonConvergenceError("train_category: registration of " + training.label(i) +
                                " did not converge");

  Eigen::MatrixXd raw(static_cast<Eigen::Index>(n), canonical.size() * canonical.dim());
  for (std::size_t i = 0; i < n; ++i)
    raw.row(static_cast<Eigen::Index>(i)) =
        flatten_weights(result.registrations[i].field.weights).transpose();

  result.design = standardize(raw);
  const int q_wanted = select_latent_dim(result.design.rows, opt.variance_required);
  const int q = static_cast<int>(
      std::min<Eigen::Index>(q_wanted, std::min<Eigen::Index>(raw.rows() - 1, raw.cols())));
  const PcaEmResult pca = pca_em(result.design.rows, q, opt.pca);

  CategoryModel& model = result.model;
  model.canonical = canonical;
  model.basis = pca.basis;
  model.latent_dim = pca.effective_q;
  model.feature_means = result.design.feature_means;
  model.feature_scales = result.design.feature_scales;
  model.beta = cfg.beta;
  model.training_latents = result.design.rows * pca.basis;
  model.explained = explained_variance(result.design.rows, model.latent_dim);
  return result;
}

// ---- Model persistence -------------------------------------------------------

inline constexpr int kModelVersion = 1;

namespace detail {
inline json matrix_row_major(const Eigen::MatrixXd& m) {
  json a = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) a.push_back(m(i, j));
  return a;
}

inline Eigen::MatrixXd matrix_from_row_major(const json& a, Eigen::Index rows, Eigen::Index cols,
                                             const std::string& what) {
  if (!a.is_array() || static_cast<Eigen::Index>(a.size()) != rows * cols)
    throw ParseError("model: bad " + what + " size");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      m(i, j) = a[static_cast<std::size_t>(i * cols + j)].get<double>();
  return m;
}

inline json vector_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Eigen::VectorXd vector_from_json(const json& a, Eigen::Index size, const std::string& what) {
  if (!a.is_array() || static_cast<Eigen::Index>(a.size()) != size)
    throw ParseError("model: bad " + what + " size");
  Eigen::VectorXd v(size);
  for (Eigen::Index i = 0; i < size; ++i) v(i) = a[static_cast<std::size_t>(i)].get<double>();
  return v;
}
}  // namespace detail

inline json model_to_json(const CategoryModel& model) {
  return {{"version", kModelVersion},
          {"beta", model.beta},
          {"canonical", cloud_to_csv_string(model.canonical)},
          {"means", detail::vector_json(model.feature_means)},
          {"scales", detail::vector_json(model.feature_scales)},
          {"basis", detail::matrix_row_major(model.basis)},
          {"latent_dim", model.latent_dim},
          {"training_latents", detail::matrix_row_major(model.training_latents)},
          {"explained_variance", model.explained},
          {"provenance", model.provenance}};
}

inline CategoryModel model_from_json(const json& j) {
  if (!j.contains("version")) throw ParseError("model: missing version");
  if (j.at("version").get<int>() != kModelVersion)
    throw ParseError("model: unsupported version " + j.at("version").dump());
  CategoryModel model;
  model.beta = j.at("beta").get<double>();
  model.canonical = cloud_from_csv_string(j.at("canonical").get<std::string>());
  if (model.canonical.empty()) throw ParseError("model: empty canonical");
  const Eigen::Index p = model.feature_count();
  model.latent_dim = j.at("latent_dim").get<int>();
  if (model.latent_dim < 1 || model.latent_dim >= p) throw ParseError("model: bad latent_dim");
  model.feature_means = detail::vector_from_json(j.at("means"), p, "means");
  model.feature_scales = detail::vector_from_json(j.at("scales"), p, "scales");
  model.basis = detail::matrix_from_row_major(j.at("basis"), p, model.latent_dim, "basis");
  const auto& tl = j.at("training_latents");
  if (!tl.is_array() || tl.size() % static_cast<std::size_t>(model.latent_dim) != 0)
    throw ParseError("model: bad training_latents size");
  const Eigen::Index ntrain = static_cast<Eigen::Index>(tl.size()) / model.latent_dim;
  model.training_latents = detail::matrix_from_row_major(tl, ntrain, model.latent_dim,
                                                         "training_latents");
  model.explained = j.value("explained_variance", 0.0);
  model.provenance = j.value("provenance", json::object());
  const double ortho =
      (model.basis.transpose() * model.basis -
       Eigen::MatrixXd::Identity(model.latent_dim, model.latent_dim))
          .cwiseAbs()
          .maxCoeff();
  if (ortho > 1e-6) throw ParseError("model: basis is not orthonormal");
  return model;
}

}  // namespace clsreg
