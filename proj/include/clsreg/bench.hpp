#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "clsreg/cpd.hpp"
#include "clsreg/geometry.hpp"
#include "clsreg/inference.hpp"
#include "clsreg/io.hpp"
#include "clsreg/parallel.hpp"
#include "clsreg/perturb.hpp"
#include "clsreg/shape_space.hpp"
#include "clsreg/synthetic.hpp"

namespace clsreg {

// One experimental condition. Occluded conditions run every planned view
// direction; full-view conditions run a single trial per instance. Noise and
// misalignment magnitudes are in model units (bounding-box diagonal = 1).
struct Condition {
  std::string id;
  bool occluded = false;
  double noise = 0.0;
  double misalign_factor = 0.0;
  double misalign_angle = 0.0;
};

struct ExperimentPlan {
  CategorySpec category;
  int train_count = 10;
  int test_count = 4;
  int views = 3;  // partial views per test instance
  std::uint64_t seed = 1;
  std::vector<std::string> methods = {"CLS", "CPD"};
  std::vector<Condition> conditions;
  CpdConfig cpd;
  InferenceConfig inference;
  int canonical_index = 0;  // -1 selects automatically (n^2 registrations)
  int threads = 1;
  // Degenerate-plan switch: score the method on the training instances
  // themselves instead of held-out draws.
  bool test_from_training = false;

  void validate() const {
    if (train_count < 2) throw std::invalid_argument("plan: train_count must be >= 2");
    if (test_count < 1) throw std::invalid_argument("plan: test_count must be >= 1");
    if (views < 1) throw std::invalid_argument("plan: views must be >= 1");
    if (methods.empty()) throw std::invalid_argument("plan: methods empty");
    if (conditions.empty()) throw std::invalid_argument("plan: conditions empty");
    if (test_from_training && test_count > train_count)
      throw std::invalid_argument("plan: test_from_training needs test_count <= train_count");
    for (const auto& m : methods)
      if (m != "CLS" && m != "CPD") throw std::invalid_argument("plan: unknown method " + m);
    cpd.validate();
    inference.validate();
  }
};

// Reference sweep mirroring the published protocol: a noise axis and a paired
// (factor, angle) misalignment axis, each on full and partial views.
inline std::vector<Condition> paper_style_conditions() {
  std::vector<Condition> all;
  const std::vector<double> noise = {0.0, 0.01, 0.02, 0.03, 0.04, 0.05};
  const std::vector<double> factors = {0.01, 0.02, 0.03, 0.04, 0.05};
  const std::vector<double> angles = {M_PI / 4, M_PI / 8, 3 * M_PI / 16, M_PI / 4, 3 * M_PI / 8};
  for (bool occl : {false, true}) {
    const std::string tag = occl ? "partial" : "full";
    for (std::size_t i = 0; i < noise.size(); ++i) {
      Condition c;
      c.id = tag + ":noise:" + std::to_string(i);
      c.occluded = occl;
      c.noise = noise[i];
      all.push_back(c);
    }
    for (std::size_t i = 0; i < factors.size(); ++i) {
      Condition c;
      c.id = tag + ":misalign:" + std::to_string(i);
      c.occluded = occl;
      c.misalign_factor = factors[i];
      c.misalign_angle = angles[i];
      all.push_back(c);
    }
  }
  return all;
}

// Conditions outside the published factor/angle lists are allowed but
// flagged, so reports cannot silently claim the published protocol.
inline std::vector<std::string> plan_warnings(const ExperimentPlan& plan) {
  const std::vector<double> factors = {0.01, 0.02, 0.03, 0.04, 0.05};
  const std::vector<double> angles = {M_PI / 4, M_PI / 8, 3 * M_PI / 16, 3 * M_PI / 8};
  auto in_list = [](double v, const std::vector<double>& list) {
    if (v == 0.0) return true;
    for (double x : list)
      if (std::abs(v - x) < 1e-12) return true;
    return false;
  };
  std::vector<std::string> warnings;
  for (const auto& c : plan.conditions) {
    if (!in_list(c.misalign_factor, factors))
      warnings.push_back("condition " + c.id + ": translation factor " +
                         std::to_string(c.misalign_factor) + " not in the published list");
    if (!in_list(c.misalign_angle, angles))
      warnings.push_back("condition " + c.id + ": angle " + std::to_string(c.misalign_angle) +
                         " not in the published list");
  }
  return warnings;
}

struct TrialRecord {
  int instance = 0;
  std::string condition;
  int view = -1;  // -1 marks a full-view trial
  std::string method;
  double error = std::numeric_limits<double>::quiet_NaN();
  double wall_ms = 0.0;  // excluded from deterministic outputs
  bool converged = false;
  bool ok = false;
  std::string message;
  std::uint64_t seed = 0;  // observation seed shared by all methods of a trial
};

struct RunResult {
  CategoryModel model;
  std::vector<TrialRecord> records;
  std::vector<std::string> warnings;
  bool any_failed = false;
};

namespace detail {

struct TrialJob {
  int instance = 0;
  std::size_t condition = 0;
  int view = -1;
  std::size_t method = 0;
};

inline PointCloud build_observation(const PointCloud& world, const Condition& cond,
                                    const Eigen::VectorXd& view_dir, std::uint64_t seed) {
  PointCloud obs = world;
  if (cond.occluded) obs = partial_view(obs, view_dir);
  if (cond.noise > 0.0) obs = add_noise(obs, cond.noise, mix_seed(seed, 7));
  return obs;
}

}  // namespace detail

// Runs every (instance, condition, view, method) trial against the trained
// model. Both methods of a trial see the same perturbed observation; the
// error is always against the noiseless, fully observed shape in its true
// world pose.
inline RunResult run_plan(const ExperimentPlan& plan) {
  plan.validate();
  RunResult result;
  result.warnings = plan_warnings(plan);

  TrainingSet training;
  for (int i = 0; i < plan.train_count; ++i) {
    const ParamMap params = sample_params(plan.category, mix_seed(plan.seed, 1000 + i));
    training.instances.push_back(
        generate_instance(plan.category, params, mix_seed(plan.seed, 2000 + i)));
    training.labels.push_back("train" + std::to_string(i));
  }

  TrainOptions topt;
  topt.canonical_index = plan.canonical_index;
  topt.threads = plan.threads;
  const TrainResult trained = train_category(training, plan.cpd, topt);
  result.model = trained.model;

  std::vector<PointCloud> truths;
  for (int i = 0; i < plan.test_count; ++i) {
    if (plan.test_from_training) {
      truths.push_back(training.instances[static_cast<std::size_t>(i)]);
    } else {
      const ParamMap params = sample_params(plan.category, mix_seed(plan.seed, 3000 + i));
      truths.push_back(generate_instance(plan.category, params, mix_seed(plan.seed, 4000 + i)));
    }
  }

  std::vector<detail::TrialJob> jobs;
  for (int i = 0; i < plan.test_count; ++i)
    for (std::size_t c = 0; c < plan.conditions.size(); ++c) {
      const int nviews = plan.conditions[c].occluded ? plan.views : 1;
      for (int v = 0; v < nviews; ++v)
        for (std::size_t m = 0; m < plan.methods.size(); ++m) {
          detail::TrialJob job;
          job.instance = i;
          job.condition = c;
          job.view = plan.conditions[c].occluded ? v : -1;
          job.method = m;
          jobs.push_back(job);
        }
    }

  result.records.resize(jobs.size());
  const CategoryModel& model = result.model;
  parallel_for(jobs.size(), plan.threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t k = begin; k < end; ++k) {
      const detail::TrialJob& job = jobs[k];
      const Condition& cond = plan.conditions[job.condition];
      TrialRecord rec;
      rec.instance = job.instance;
      rec.condition = cond.id;
      rec.view = job.view;
      rec.method = plan.methods[job.method];
      const std::uint64_t obs_seed = mix_seed(
          plan.seed, 6000 + ((static_cast<std::uint64_t>(job.instance) * 97 + job.condition) * 97 +
                             static_cast<std::uint64_t>(job.view + 1)));
      rec.seed = obs_seed;

      const auto start = std::chrono::steady_clock::now();
      try {
        const PointCloud& truth = truths[static_cast<std::size_t>(job.instance)];
        // The scene is the instance as the sensor meets it: misalignment
        // poses it, occlusion and noise act on the posed cloud. Scoring
        // always targets the clean, fully observed, unposed instance.
        PointCloud scene = truth;
        if (cond.misalign_factor != 0.0 || cond.misalign_angle != 0.0) {
          const RigidTransform t =
              sample_misalignment(cond.misalign_factor, cond.misalign_angle, mix_seed(obs_seed, 8));
          scene = apply_rigid(scene, t);
        }
        Eigen::VectorXd view_dir = Eigen::VectorXd::Zero(3);
        if (cond.occluded) {
          Rng vr(mix_seed(plan.seed, 5000 + job.instance * 131 + job.view));
          view_dir = vr.unit_vector(3);
        }
        const PointCloud observation = detail::build_observation(scene, cond, view_dir, obs_seed);

        // Both methods are scored on their deformed canonical. The latent
        // fit also carries a rigid component, but that part explains the
        // scene pose, not the shape, so it stays out of the estimate.
        PointCloud completed;
        if (rec.method == "CLS") {
          const InferenceResult fit = infer(model, observation, plan.inference);
          completed = apply_deformation(fit.field, model.canonical);
          rec.converged = fit.converged;
        } else {
          const CpdResult fit = cpd_register(model.canonical, observation, plan.cpd);
          completed = apply_deformation(fit.field, model.canonical);
          rec.converged = fit.converged;
        }
        rec.error = chamfer_error(completed, truth);
        rec.ok = true;
      } catch (const std::exception& e) {
        rec.ok = false;
        rec.message = e.what();
      }
      rec.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - start)
                        .count();
      result.records[k] = std::move(rec);
    }
  });

  for (const auto& r : result.records)
    if (!r.ok) result.any_failed = true;
  return result;
}

// Two-stage mean per (condition, method): view errors average within each
// instance first, instance means average across instances; sd is the
// population spread of the instance means. Failed trials are excluded.
struct SummaryRow {
  std::string condition;
  std::string method;
  double mean = 0.0;
  double sd = 0.0;
  int n = 0;  // instances contributing
};

inline std::vector<SummaryRow> aggregate(const std::vector<TrialRecord>& records) {
  if (records.empty()) throw std::invalid_argument("aggregate: no records");
  std::map<std::pair<std::string, std::string>, std::map<int, std::pair<double, int>>> buckets;
  for (const auto& r : records) {
    if (!r.ok) continue;
    auto& per_instance = buckets[{r.condition, r.method}][r.instance];
    per_instance.first += r.error;
    per_instance.second += 1;
  }
  std::vector<SummaryRow> rows;
  for (const auto& [key, instances] : buckets) {
    std::vector<double> means;
    for (const auto& [idx, acc] : instances)
      if (acc.second > 0) means.push_back(acc.first / acc.second);
    if (means.empty()) continue;
    SummaryRow row;
    row.condition = key.first;
    row.method = key.second;
    row.n = static_cast<int>(means.size());
    double mean = 0.0;
    for (double v : means) mean += v;
    mean /= means.size();
    double var = 0.0;
    for (double v : means) var += (v - mean) * (v - mean);
    var /= means.size();
    row.mean = mean;
    row.sd = std::sqrt(var);
    rows.push_back(row);
  }
  return rows;  // map iteration is sorted, so rows are ordered by key
}

// ---- Deterministic report output ---------------------------------------------

namespace detail {
inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}
}  // namespace detail

inline std::string summary_to_csv(const std::vector<SummaryRow>& rows) {
  std::string out = "condition,method,mean,sd,n\n";
  for (const auto& r : rows)
    out += r.condition + "," + r.method + "," + detail::fmt(r.mean) + "," + detail::fmt(r.sd) +
           "," + std::to_string(r.n) + "\n";
  return out;
}

inline json summary_to_json(const std::vector<SummaryRow>& rows) {
  json arr = json::array();
  for (const auto& r : rows)
    arr.push_back({{"condition", r.condition},
                   {"method", r.method},
                   {"mean", r.mean},
                   {"sd", r.sd},
                   {"n", r.n}});
  return {{"summary", arr}};
}

inline std::vector<SummaryRow> summary_from_json(const json& j) {
  std::vector<SummaryRow> rows;
  for (const auto& e : j.at("summary")) {
    SummaryRow r;
    r.condition = e.at("condition").get<std::string>();
    r.method = e.at("method").get<std::string>();
    r.mean = e.at("mean").get<double>();
    r.sd = e.at("sd").get<double>();
    r.n = e.at("n").get<int>();
    rows.push_back(std::move(r));
  }
  return rows;
}

// Trial table without wall times, reproducible byte-for-byte across reruns.
inline std::string records_to_csv(const std::vector<TrialRecord>& records) {
  std::string out = "instance,condition,view,method,error,converged,ok,seed\n";
  for (const auto& r : records)
    out += std::to_string(r.instance) + "," + r.condition + "," + std::to_string(r.view) + "," +
           r.method + "," + (r.ok ? detail::fmt(r.error) : std::string("nan")) + "," +
           (r.converged ? "1" : "0") + "," + (r.ok ? "1" : "0") + "," + std::to_string(r.seed) +
           "\n";
  return out;
}

// Wall-clock sidecar; the only bench output that varies between reruns.
inline std::string timings_to_csv(const std::vector<TrialRecord>& records) {
  std::string out = "instance,condition,view,method,wall_ms\n";
  for (const auto& r : records)
    out += std::to_string(r.instance) + "," + r.condition + "," + std::to_string(r.view) + "," +
           r.method + "," + detail::fmt(r.wall_ms) + "\n";
  return out;
}

// ---- Plan JSON -----------------------------------------------------------------

namespace detail {
inline void check_keys(const json& j, const std::vector<std::string>& allowed,
                       const std::string& what) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const auto& k : allowed)
      if (it.key() == k) known = true;
    if (!known) throw ParseError(what + ": unknown key '" + it.key() + "'");
  }
}
}  // namespace detail

inline json plan_to_json(const ExperimentPlan& plan) {
  json conditions = json::array();
  for (const auto& c : plan.conditions)
    conditions.push_back({{"id", c.id},
                          {"occluded", c.occluded},
                          {"noise", c.noise},
                          {"misalign_factor", c.misalign_factor},
                          {"misalign_angle", c.misalign_angle}});
  json schedule = json::array();
  for (double m : plan.inference.sigma2_schedule) schedule.push_back(m);
  return {{"category", {{"family", plan.category.family}, {"samples", plan.category.samples}}},
          {"train_count", plan.train_count},
          {"test_count", plan.test_count},
          {"views", plan.views},
          {"seed", plan.seed},
          {"methods", plan.methods},
          {"conditions", conditions},
          {"cpd",
           {{"beta", plan.cpd.beta},
            {"lambda", plan.cpd.lambda},
            {"omega", plan.cpd.omega},
            {"max_iterations", plan.cpd.max_iterations},
            {"tolerance", plan.cpd.tolerance}}},
          {"inference",
           {{"sigma2", plan.inference.sigma2},
            {"max_iterations", plan.inference.max_iterations},
            {"gradient_tolerance", plan.inference.gradient_tolerance},
            {"literal_eq12", plan.inference.direction == EnergyDirection::LiteralEq12},
            {"sigma2_schedule", schedule}}},
          {"canonical_index", plan.canonical_index},
          {"threads", plan.threads},
          {"test_from_training", plan.test_from_training}};
}

inline ExperimentPlan plan_from_json(const json& j) {
  detail::check_keys(j,
                     {"category", "train_count", "test_count", "views", "seed", "methods",
                      "conditions", "cpd", "inference", "canonical_index", "threads",
                      "test_from_training"},
                     "plan");
  ExperimentPlan plan;
  if (j.contains("category")) {
    const json& c = j.at("category");
    detail::check_keys(c, {"family", "samples"}, "plan.category");
    const std::string family = c.value("family", "mug");
    const int samples = c.value("samples", 300);
    if (family == "mug")
      plan.category = mug_spec(samples);
    else if (family == "drill")
      plan.category = drill_spec(samples);
    else
      throw ParseError("plan: unknown family " + family);
  } else {
    plan.category = mug_spec();
  }
  plan.train_count = j.value("train_count", plan.train_count);
  plan.test_count = j.value("test_count", plan.test_count);
  plan.views = j.value("views", plan.views);
  plan.seed = j.value("seed", plan.seed);
  if (j.contains("methods")) plan.methods = j.at("methods").get<std::vector<std::string>>();
  if (j.contains("conditions")) {
    plan.conditions.clear();
    for (const auto& e : j.at("conditions")) {
      detail::check_keys(e, {"id", "occluded", "noise", "misalign_factor", "misalign_angle"},
                         "plan.conditions");
      Condition c;
      c.id = e.value("id", "condition" + std::to_string(plan.conditions.size()));
      c.occluded = e.value("occluded", false);
      c.noise = e.value("noise", 0.0);
      c.misalign_factor = e.value("misalign_factor", 0.0);
      c.misalign_angle = e.value("misalign_angle", 0.0);
      plan.conditions.push_back(std::move(c));
    }
  } else {
    plan.conditions = paper_style_conditions();
  }
  if (j.contains("cpd")) {
    const json& c = j.at("cpd");
    detail::check_keys(c, {"beta", "lambda", "omega", "max_iterations", "tolerance"}, "plan.cpd");
    plan.cpd.beta = c.value("beta", plan.cpd.beta);
    plan.cpd.lambda = c.value("lambda", plan.cpd.lambda);
    plan.cpd.omega = c.value("omega", plan.cpd.omega);
    plan.cpd.max_iterations = c.value("max_iterations", plan.cpd.max_iterations);
    plan.cpd.tolerance = c.value("tolerance", plan.cpd.tolerance);
  }
  if (j.contains("inference")) {
    const json& c = j.at("inference");
    detail::check_keys(
        c, {"sigma2", "max_iterations", "gradient_tolerance", "literal_eq12", "sigma2_schedule"},
        "plan.inference");
    plan.inference.sigma2 = c.value("sigma2", plan.inference.sigma2);
    plan.inference.max_iterations = c.value("max_iterations", plan.inference.max_iterations);
    plan.inference.gradient_tolerance =
        c.value("gradient_tolerance", plan.inference.gradient_tolerance);
    if (c.value("literal_eq12", false)) plan.inference.direction = EnergyDirection::LiteralEq12;
    if (c.contains("sigma2_schedule"))
      plan.inference.sigma2_schedule = c.at("sigma2_schedule").get<std::vector<double>>();
  }
  plan.canonical_index = j.value("canonical_index", plan.canonical_index);
  plan.threads = j.value("threads", plan.threads);
  plan.test_from_training = j.value("test_from_training", plan.test_from_training);
  return plan;
}

}  // namespace clsreg
