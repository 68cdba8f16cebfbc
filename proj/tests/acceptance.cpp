// End-to-end acceptance checks. Each check prints exactly one PASS/FAIL line
// with its key numbers; the exit code is the number of failures. The mug
// category model in the middle section is trained once and shared.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "clsreg/clsreg.hpp"
#include "test_support.hpp"

#ifndef CLSREG_BIN
#error "CLSREG_BIN must be defined as the path to the clsreg binary"
#endif

using namespace clsreg;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int precision = 3) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

struct Outcome {
  bool ok = false;
  std::string detail;
};

struct Checker {
  int failures = 0;
  void run(int index, const std::string& label, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.ok = false;
      o.detail = std::string("exception: ") + e.what();
    }
    std::cout << "[" << std::setw(2) << index << "] " << (o.ok ? "PASS" : "FAIL") << "  " << label
              << "  (" << o.detail << ")" << std::endl;
    if (!o.ok) ++failures;
  }
};

PointCloud random_cloud(std::uint64_t seed, Eigen::Index n, double scale) {
  Rng rng(seed);
  PointCloud c;
  c.points.resize(n, 3);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) c.points(i, k) = scale * rng.normal();
  return c;
}

// ---- check 1: self-registration ------------------------------------------------

Outcome check_self_registration() {
  const auto start = Clock::now();
  double worst_disp = 0.0, worst_resid = 0.0, worst_colsum = 0.0;
  for (int t = 0; t < 20; ++t) {
    const PointCloud cloud = random_cloud(100 + t, 30, 0.5);
    const CpdResult reg = cpd_register(cloud, cloud, CpdConfig{});
    const PointCloud deformed = apply_deformation(reg.field, cloud);
    const double disp = (deformed.points - cloud.points).rowwise().norm().maxCoeff();
    worst_disp = std::max(worst_disp, disp / bbox_diagonal(cloud));
    worst_resid = std::max(worst_resid, reg.max_mstep_residual);
    worst_colsum = std::max(worst_colsum, reg.max_colsum_error);
  }
  const double elapsed = seconds_since(start);
  Outcome o;
  o.ok = worst_disp < 1e-6 && worst_resid < 1e-8 && worst_colsum < 1e-12 && elapsed < 10.0;
  o.detail = "max disp/diag " + fmt(worst_disp) + ", solve residual " + fmt(worst_resid) +
             ", colsum err " + fmt(worst_colsum) + ", " + fmt(elapsed, 2) + " s";
  return o;
}

// ---- check 2: latent basis vs direct SVD ---------------------------------------

Outcome check_basis_matches_svd() {
  double worst_angle = 0.0, worst_resid_gap = 0.0;
  for (int t = 0; t < 10; ++t) {
    Rng rng(200 + t);
    Eigen::MatrixXd raw(10, 30);
    for (Eigen::Index i = 0; i < raw.rows(); ++i)
      for (Eigen::Index j = 0; j < raw.cols(); ++j) raw(i, j) = rng.normal();
    const DesignMatrix design = standardize(raw);
    const PcaEmResult em = pca_em(design.rows, 3);

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(design.rows, Eigen::ComputeThinV);
    const Eigen::MatrixXd top = svd.matrixV().leftCols(3);
    worst_angle = std::max(worst_angle, detail::principal_angle(em.basis, top));

    const double resid =
        (design.rows - design.rows * em.basis * em.basis.transpose()).norm();
    const Eigen::VectorXd sv2 = svd.singularValues().array().square();
    const double truncation = std::sqrt(std::max(0.0, sv2.tail(sv2.size() - 3).sum()));
    worst_resid_gap = std::max(worst_resid_gap, std::abs(resid - truncation));
  }
  Outcome o;
  o.ok = worst_angle < 1e-6 && worst_resid_gap < 1e-8;
  o.detail = "max principal angle " + fmt(worst_angle) + ", residual gap " + fmt(worst_resid_gap);
  return o;
}

// ---- check 3: analytic gradient vs finite differences --------------------------

CategoryModel random_small_model(std::uint64_t seed, Eigen::Index m, int q) {
  Rng rng(seed);
  CategoryModel model;
  model.canonical.points.resize(m, 3);
  for (Eigen::Index i = 0; i < m; ++i)
    for (int k = 0; k < 3; ++k) model.canonical.points(i, k) = rng.normal();
  model.beta = 1.0;
  model.latent_dim = q;
  const Eigen::Index p = 3 * m;
  model.basis = detail::random_orthonormal(p, q, rng);
  model.feature_means.resize(p);
  model.feature_scales.resize(p);
  for (Eigen::Index i = 0; i < p; ++i) {
    model.feature_means(i) = 0.05 * rng.normal();
    model.feature_scales(i) = std::exp(0.2 * rng.normal());
  }
  return model;
}

Outcome check_gradient_matches_fd() {
  const double h = 1e-5;
  const double sigma2 = 0.05;
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const int q = 2 + (t % 2);
    const CategoryModel model = random_small_model(300 + t, 15, q);
    Rng rng(400 + t);
    PointCloud obs;
    obs.points.resize(20, 3);
    for (Eigen::Index j = 0; j < obs.size(); ++j) {
      const Eigen::Index row = static_cast<Eigen::Index>(rng.uniform01() * 15.0);
      for (int k = 0; k < 3; ++k)
        obs.points(j, k) = model.canonical.points(row, k) + 0.3 * rng.normal();
    }
    LatentPose pose;
    pose.x.resize(q);
    for (int k = 0; k < q; ++k) pose.x(k) = 0.5 * rng.normal();
    pose.theta = sample_misalignment(0.1, 0.4, 500 + t);

    const EnergyGradient g = energy_gradient(model, obs, pose, sigma2);
    Eigen::VectorXd analytic(q + 6), numeric(q + 6);
    analytic << g.dx, g.drot, g.dtrans;

    auto energy_at = [&](const LatentPose& p) {
      return inference_energy(model, obs, p, sigma2);
    };
    for (int k = 0; k < q; ++k) {
      LatentPose plus = pose, minus = pose;
      plus.x(k) += h;
      minus.x(k) -= h;
      numeric(k) = (energy_at(plus) - energy_at(minus)) / (2.0 * h);
    }
    for (int k = 0; k < 3; ++k) {
      Eigen::Vector3d axis = Eigen::Vector3d::Zero();
      axis(k) = 1.0;
      LatentPose plus = pose, minus = pose;
      plus.theta.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(h, axis)) * pose.theta.rotation;
      minus.theta.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(-h, axis)) * pose.theta.rotation;
      numeric(q + k) = (energy_at(plus) - energy_at(minus)) / (2.0 * h);
    }
    for (int k = 0; k < 3; ++k) {
      LatentPose plus = pose, minus = pose;
      plus.theta.translation(k) += h;
      minus.theta.translation(k) -= h;
      numeric(q + 3 + k) = (energy_at(plus) - energy_at(minus)) / (2.0 * h);
    }
    const double rel = (analytic - numeric).norm() / std::max(numeric.norm(), 1e-12);
    worst = std::max(worst, rel);
  }
  Outcome o;
  o.ok = worst < 1e-4;
  o.detail = "worst relative error " + fmt(worst);
  return o;
}

// ---- shared mug model for the category-level checks ----------------------------

struct SharedModel {
  bool ready = false;
  std::string error;
  TrainResult trained;
  std::vector<PointCloud> holdouts;
  double train_seconds = 0.0;
};

SharedModel build_shared_model() {
  SharedModel shared;
  try {
    const CategorySpec spec = mug_spec(300);
    TrainingSet training;
    for (int i = 0; i < 10; ++i) {
      const ParamMap params = sample_params(spec, mix_seed(42, 1000 + i));
      training.instances.push_back(generate_instance(spec, params, mix_seed(42, 2000 + i)));
      training.labels.push_back("mug" + std::to_string(i));
    }
    CpdConfig cpd;
    cpd.max_iterations = 700;  // the widest mug pairs need roughly 500 EM steps
    TrainOptions topt;
    topt.canonical_index = 0;
    const auto start = Clock::now();
    shared.trained = train_category(training, cpd, topt);
    shared.train_seconds = seconds_since(start);
    for (int i = 0; i < 4; ++i) {
      const ParamMap params = sample_params(spec, mix_seed(42, 3000 + i));
      shared.holdouts.push_back(generate_instance(spec, params, mix_seed(42, 4000 + i)));
    }
    shared.ready = true;
  } catch (const std::exception& e) {
    shared.error = e.what();
  }
  return shared;
}

Outcome model_unavailable(const SharedModel& shared) {
  Outcome o;
  o.ok = false;
  o.detail = "mug model unavailable: " + shared.error;
  return o;
}

// ---- check 4: explained variance at the chosen dimension -----------------------

Outcome check_latent_dimension(const SharedModel& shared) {
  if (!shared.ready) return model_unavailable(shared);
  const int q = shared.trained.model.latent_dim;
  const double explained = shared.trained.model.explained;
  const double previous = explained_variance(shared.trained.design.rows, q - 1);
  Outcome o;
  o.ok = q >= 1 && explained >= 0.95 && previous < 0.95;
  o.detail = "q " + std::to_string(q) + ", explained " + fmt(explained, 4) + ", at q-1 " +
             fmt(previous, 4) + ", trained in " + fmt(shared.train_seconds, 2) + " s";
  return o;
}

// ---- checks 5-7: completion quality against direct registration ----------------
//
// All three checks share one protocol. The latent fit runs with the coarse to
// fine sigma schedule; the baseline registers the canonical onto the same
// observation with its training beta, lambda, omega (the defaults) and the
// same iteration ceiling, so neither side gets a parameter advantage. Each
// method is scored on its deformed canonical against the clean, fully
// observed, unposed instance. The latent fit also carries a rigid component,
// but that part explains the scene pose, not the shape, so it stays out of
// the estimate.

InferenceConfig completion_config() {
  InferenceConfig icfg;
  icfg.max_iterations = 400;
  icfg.sigma2_schedule = {25.0, 9.0, 3.0, 1.0};
  return icfg;
}

CpdConfig baseline_config() {
  CpdConfig pcfg;
  pcfg.max_iterations = 400;
  return pcfg;
}

double min_distance(const Eigen::RowVector3d& point, const PointCloud& cloud) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < cloud.size(); ++i)
    best = std::min(best, (cloud.points.row(i) - point).norm());
  return best;
}

Outcome check_occluded_completion(const SharedModel& shared) {
  if (!shared.ready) return model_unavailable(shared);
  const auto start = Clock::now();
  const CategoryModel& model = shared.trained.model;
  const InferenceConfig icfg = completion_config();
  const CpdConfig pcfg = baseline_config();

  double cls_err = 0.0, cpd_err = 0.0, cls_cov = 0.0, cpd_cov = 0.0;
  int trials = 0;
  for (int i = 0; i < 4; ++i) {
    const PointCloud& truth = shared.holdouts[static_cast<std::size_t>(i)];
    for (int v = 0; v < 3; ++v) {
      Rng vr(mix_seed(42, 5000 + i * 131 + v));
      const Eigen::VectorXd view_dir = vr.unit_vector(3);
      const std::vector<Eigen::Index> visible = partial_view_indices(truth, view_dir);
      PointCloud obs;
      obs.points.resize(static_cast<Eigen::Index>(visible.size()), 3);
      for (std::size_t k = 0; k < visible.size(); ++k)
        obs.points.row(static_cast<Eigen::Index>(k)) = truth.points.row(visible[k]);

      std::vector<bool> seen(static_cast<std::size_t>(truth.size()), false);
      for (Eigen::Index idx : visible) seen[static_cast<std::size_t>(idx)] = true;

      const InferenceResult fit = infer(model, obs, icfg);
      const PointCloud completed = apply_deformation(fit.field, model.canonical);
      const CpdResult reg = cpd_register(model.canonical, obs, pcfg);
      const PointCloud direct = apply_deformation(reg.field, model.canonical);

      cls_err += chamfer_error(completed, truth);
      cpd_err += chamfer_error(direct, truth);

      int hidden = 0, cls_hit = 0, cpd_hit = 0;
      for (Eigen::Index r = 0; r < truth.size(); ++r) {
        if (seen[static_cast<std::size_t>(r)]) continue;
        ++hidden;
        const Eigen::RowVector3d p = truth.points.row(r);
        if (min_distance(p, completed) <= 0.1) ++cls_hit;
        if (min_distance(p, direct) <= 0.1) ++cpd_hit;
      }
      cls_cov += static_cast<double>(cls_hit) / hidden;
      cpd_cov += static_cast<double>(cpd_hit) / hidden;
      ++trials;
    }
  }
  cls_err /= trials;
  cpd_err /= trials;
  cls_cov /= trials;
  cpd_cov /= trials;
  const double elapsed = seconds_since(start);
  Outcome o;
  o.ok = cls_err < cpd_err && cls_cov >= 0.5 && cpd_cov < 0.5 && elapsed < 900.0;
  o.detail = "chamfer cls " + fmt(cls_err) + " vs cpd " + fmt(cpd_err) + ", hidden coverage cls " +
             fmt(cls_cov, 3) + " vs cpd " + fmt(cpd_cov, 3) + ", " + fmt(elapsed, 2) + " s";
  return o;
}

Outcome check_full_view_baseline(const SharedModel& shared) {
  if (!shared.ready) return model_unavailable(shared);
  const CategoryModel& model = shared.trained.model;
  const InferenceConfig icfg = completion_config();
  const CpdConfig pcfg = baseline_config();

  double cls_err = 0.0, cpd_err = 0.0;
  for (const PointCloud& truth : shared.holdouts) {
    const InferenceResult fit = infer(model, truth, icfg);
    const CpdResult reg = cpd_register(model.canonical, truth, pcfg);
    cls_err += chamfer_error(apply_deformation(fit.field, model.canonical), truth);
    cpd_err += chamfer_error(apply_deformation(reg.field, model.canonical), truth);
  }
  cls_err /= shared.holdouts.size();
  cpd_err /= shared.holdouts.size();
  Outcome o;
  o.ok = cpd_err <= cls_err;
  o.detail = "chamfer cpd " + fmt(cpd_err) + " <= cls " + fmt(cls_err);
  return o;
}

Outcome check_misaligned_completion(const SharedModel& shared) {
  if (!shared.ready) return model_unavailable(shared);
  const CategoryModel& model = shared.trained.model;
  const InferenceConfig icfg = completion_config();
  const CpdConfig pcfg = baseline_config();

  const double pi = std::acos(-1.0);
  double cls_err = 0.0, cpd_err = 0.0;
  int trials = 0;
  for (std::size_t i = 0; i < shared.holdouts.size(); ++i) {
    const PointCloud& truth = shared.holdouts[i];
    for (int k = 0; k < 3; ++k) {
      const RigidTransform t = sample_misalignment(
          0.05, 3.0 * pi / 8.0, mix_seed(42, 7000 + 3 * static_cast<int>(i) + k));
      const PointCloud scene = apply_rigid(truth, t);
      const InferenceResult fit = infer(model, scene, icfg);
      const CpdResult reg = cpd_register(model.canonical, scene, pcfg);
      cls_err += chamfer_error(apply_deformation(fit.field, model.canonical), truth);
      cpd_err += chamfer_error(apply_deformation(reg.field, model.canonical), truth);
      ++trials;
    }
  }
  cls_err /= trials;
  cpd_err /= trials;
  Outcome o;
  o.ok = cls_err < cpd_err;
  o.detail = "chamfer cls " + fmt(cls_err) + " < cpd " + fmt(cpd_err) +
             " under 0.05 shift, 67.5 deg";
  return o;
}

// ---- check 8: grasp transfer under a known scaling ------------------------------

Outcome check_grasp_scaling(const SharedModel& shared) {
  if (!shared.ready) return model_unavailable(shared);
  const PointCloud& canonical = shared.trained.model.canonical;
  PointCloud target = canonical;
  target.points *= 1.2;
  CpdConfig cfg;
  cfg.max_iterations = 300;
  const CpdResult reg = cpd_register(canonical, target, cfg);

  InferenceResult fitted;
  fitted.field = reg.field;
  fitted.pose.x = Eigen::VectorXd::Zero(shared.trained.model.latent_dim);
  fitted.pose.theta = RigidTransform::identity();
  fitted.converged = true;

  std::vector<Eigen::Index> order(static_cast<std::size_t>(canonical.size()));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return canonical.points.row(a).norm() > canonical.points.row(b).norm();
  });

  GraspAnnotation annotation;
  const Eigen::Quaterniond orientations[3] = {
      Eigen::Quaterniond(1, 0, 0, 0),
      Eigen::Quaterniond(0.5, 0.5, 0.5, 0.5),
      Eigen::Quaterniond(0.2, -0.4, 0.8, 0.4).normalized()};
  for (int k = 0; k < 3; ++k) {
    AnnotatedPose p;
    p.label = "pose" + std::to_string(k);
    p.pose.position = canonical.points.row(order[static_cast<std::size_t>(k) * 40]).transpose();
    p.pose.orientation = orientations[k];
    annotation.poses.push_back(p);
  }

  const WarpedGrasp warped = warp_grasp(annotation, fitted);
  double worst_rel = 0.0, worst_unit = 0.0;
  for (int k = 0; k < 3; ++k) {
    const Eigen::Vector3d expected = 1.2 * annotation.poses[static_cast<std::size_t>(k)].pose.position;
    const double rel = (warped.poses[static_cast<std::size_t>(k)].pose.position - expected).norm() /
                       expected.norm();
    worst_rel = std::max(worst_rel, rel);
    worst_unit = std::max(
        worst_unit, std::abs(warped.poses[static_cast<std::size_t>(k)].pose.orientation.norm() - 1.0));
  }
  Outcome o;
  o.ok = worst_rel <= 0.02 && worst_unit <= 1e-9;
  o.detail = "worst position error " + fmt(worst_rel * 100.0, 3) + "%, unit defect " +
             fmt(worst_unit) + ", " + std::to_string(warped.warnings.size()) + " warnings";
  return o;
}

// ---- check 9: CLI reruns are byte-identical -------------------------------------

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(CLSREG_BIN) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (status == -1 || !WIFEXITED(status)) return -1;
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

Outcome check_cli_reproducibility() {
  const fs::path root =
      fs::temp_directory_path() / ("clsreg_accept_" + std::to_string(::getpid()));
  std::error_code ec;
  fs::remove_all(root, ec);
  fs::create_directories(root / "train");

  const TrainingSet set = testsupport::toy_mugs(3, 40, 21);
  for (std::size_t i = 0; i < set.instances.size(); ++i)
    write_ply((root / "train" / ("mug" + std::to_string(i) + ".ply")).string(),
              set.instances[i]);

  Outcome o;
  const std::string train_args = "train --input " + (root / "train").string() +
                                 " --canonical 0 --seed 7 --allow-nonconverged --output ";
  const int t1 = run_cli(train_args + (root / "model1.json").string(), root / "t1.log");
  const int t2 = run_cli(train_args + (root / "model2.json").string(), root / "t2.log");
  const bool train_ok =
      t1 == 0 && t2 == 0 && slurp(root / "model1.json") == slurp(root / "model2.json");

  json plan;
  plan["category"] = {{"family", "mug"}, {"samples", 40}};
  plan["train_count"] = 2;
  plan["test_count"] = 1;
  plan["views"] = 1;
  plan["seed"] = 13;
  plan["canonical_index"] = 0;
  plan["test_from_training"] = true;
  plan["methods"] = {"CLS", "CPD"};
  plan["cpd"] = {{"max_iterations", 400}};
  plan["inference"] = {{"max_iterations", 150}};
  json full;
  full["id"] = "full:clean";
  json part;
  part["id"] = "partial:clean";
  part["occluded"] = true;
  plan["conditions"] = json::array({full, part});
  write_json_file((root / "plan.json").string(), plan);

  const std::string bench_args = "bench --input " + (root / "plan.json").string() + " --output ";
  const int b1 = run_cli(bench_args + (root / "bench1").string(), root / "b1.log");
  const int b2 = run_cli(bench_args + (root / "bench2").string(), root / "b2.log");
  bool bench_ok = b1 == 0 && b2 == 0;
  int mismatched = 0;
  if (bench_ok)
    for (const char* name :
         {"records.csv", "summary.csv", "summary.json", "model.json", "provenance.json"})
      if (slurp(root / "bench1" / name) != slurp(root / "bench2" / name)) ++mismatched;
  bench_ok = bench_ok && mismatched == 0;

  o.ok = train_ok && bench_ok;
  o.detail = "train exits " + std::to_string(t1) + "/" + std::to_string(t2) +
             (train_ok ? ", model identical" : ", model MISMATCH") + "; bench exits " +
             std::to_string(b1) + "/" + std::to_string(b2) + ", " + std::to_string(mismatched) +
             " files differ";
  fs::remove_all(root, ec);
  return o;
}

// ---- check 10: single-inference wall time ---------------------------------------

Outcome check_inference_budget(const SharedModel& shared) {
  if (!shared.ready) return model_unavailable(shared);
  const CategoryModel& model = shared.trained.model;
  const PointCloud& obs = shared.holdouts[0];
  const auto start = Clock::now();
  const InferenceResult fit = infer(model, obs, InferenceConfig{});
  const double elapsed = seconds_since(start);
  Outcome o;
  o.ok = model.latent_dim <= 8 && elapsed < 60.0;
  o.detail = "M " + std::to_string(model.canonical.size()) + ", N " + std::to_string(obs.size()) +
             ", q " + std::to_string(model.latent_dim) + ", " + fmt(elapsed, 2) + " s, " +
             std::to_string(fit.iterations) + " steps";
  return o;
}

}  // namespace

int main() {
  std::cout << "acceptance checks (category-level registration stack)" << std::endl;
  Checker ck;

  ck.run(1, "cpd self-registration stays put with clean solves", check_self_registration);
  ck.run(2, "latent basis matches the principal subspace", check_basis_matches_svd);
  ck.run(3, "analytic energy gradient matches finite differences", check_gradient_matches_fd);

  const SharedModel shared = build_shared_model();
  ck.run(4, "mug model explains 95% variance at the minimal dimension",
         [&] { return check_latent_dimension(shared); });
  ck.run(5, "occluded views: latent completion beats direct registration",
         [&] { return check_occluded_completion(shared); });
  ck.run(6, "full views: direct registration is at least as accurate",
         [&] { return check_full_view_baseline(shared); });
  ck.run(7, "misaligned views: latent+pose fit beats direct registration",
         [&] { return check_misaligned_completion(shared); });
  ck.run(8, "grasp transfer tracks a uniform scaling",
         [&] { return check_grasp_scaling(shared); });
  ck.run(9, "cli train and bench rerun byte-identically", check_cli_reproducibility);
  ck.run(10, "single inference finishes inside the time budget",
         [&] { return check_inference_budget(shared); });

  std::cout << (ck.failures == 0 ? "all checks passed" : std::to_string(ck.failures) + " check(s) failed")
            << std::endl;
  return ck.failures;
}
