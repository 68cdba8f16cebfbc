// Command-line front end: train a category model, fit it to observations,
// warp grasp annotations, sample novel shapes, and run benchmark plans.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "clsreg/clsreg.hpp"

namespace fs = std::filesystem;
using clsreg::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitTrainFailure = 3;
constexpr int kExitNonConverged = 4;
constexpr int kExitBenchTrialFailure = 5;

struct CommonOptions {
  std::string model_path;
  std::string input;
  std::string output;
  std::string config_path;
  std::uint64_t seed = 1;
  int threads = 0;  // 0 means all logical cores
  double beta = 1.0;
  double lambda = 3.0;
  double omega = 0.1;
  double sigma2 = 0.0;  // 0 lets inference pick its default
  bool allow_nonconverged = false;
  bool literal_eq12 = false;

  int effective_threads() const {
    if (threads > 0) return threads;
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
  }
};

// Config-file values override defaults; explicit flags override the file.
void merge_config_file(CommonOptions& opt, CLI::App* sub) {
  if (opt.config_path.empty()) return;
  const json cfg = clsreg::load_json_file(opt.config_path);
  if (!cfg.is_object()) throw clsreg::ParseError(opt.config_path + ": config must be an object");
  const std::vector<std::string> allowed = {"seed",   "threads", "beta",
                                            "lambda", "omega",   "sigma2",
                                            "allow_nonconverged", "literal_eq12"};
  for (auto it = cfg.begin(); it != cfg.end(); ++it) {
    bool known = false;
    for (const auto& k : allowed)
      if (it.key() == k) known = true;
    if (!known) throw clsreg::ParseError(opt.config_path + ": unknown config key '" + it.key() + "'");
  }
  auto flag_given = [&](const std::string& name) {
    const CLI::Option* o = sub->get_option_no_throw(name);
    return o != nullptr && o->count() > 0;
  };
  if (cfg.contains("seed") && !flag_given("--seed")) opt.seed = cfg.at("seed").get<std::uint64_t>();
  if (cfg.contains("threads") && !flag_given("--threads")) opt.threads = cfg.at("threads").get<int>();
  if (cfg.contains("beta") && !flag_given("--beta")) opt.beta = cfg.at("beta").get<double>();
  if (cfg.contains("lambda") && !flag_given("--lambda")) opt.lambda = cfg.at("lambda").get<double>();
  if (cfg.contains("omega") && !flag_given("--omega")) opt.omega = cfg.at("omega").get<double>();
  if (cfg.contains("sigma2") && !flag_given("--sigma2")) opt.sigma2 = cfg.at("sigma2").get<double>();
  if (cfg.contains("allow_nonconverged") && !flag_given("--allow-nonconverged"))
    opt.allow_nonconverged = cfg.at("allow_nonconverged").get<bool>();
  if (cfg.contains("literal_eq12") && !flag_given("--literal-eq12"))
    opt.literal_eq12 = cfg.at("literal_eq12").get<bool>();
}

// Every output embeds the parameters that produced it.
json provenance_block(const std::string& command, const CommonOptions& opt) {
  return {{"command", command},
          {"seed", opt.seed},
          {"threads", opt.effective_threads()},
          {"beta", opt.beta},
          {"lambda", opt.lambda},
          {"omega", opt.omega},
          {"sigma2", opt.sigma2},
          {"allow_nonconverged", opt.allow_nonconverged},
          {"literal_eq12", opt.literal_eq12}};
}

clsreg::CpdConfig cpd_config_from(const CommonOptions& opt) {
  clsreg::CpdConfig cfg;
  cfg.beta = opt.beta;
  cfg.lambda = opt.lambda;
  cfg.omega = opt.omega;
  return cfg;
}

clsreg::InferenceConfig inference_config_from(const CommonOptions& opt) {
  clsreg::InferenceConfig cfg;
  cfg.sigma2 = opt.sigma2;
  if (opt.literal_eq12) cfg.direction = clsreg::EnergyDirection::LiteralEq12;
  return cfg;
}

std::vector<fs::path> list_cloud_files(const fs::path& dir) {
  if (!fs::is_directory(dir))
    throw clsreg::ParseError(dir.string() + ": not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension().string();
    if (ext == ".ply" || ext == ".csv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.size() < 2)
    throw clsreg::ParseError(dir.string() + ": need at least 2 cloud files (.ply/.csv)");
  return files;
}

int cmd_train(const CommonOptions& opt, const std::string& canonical_arg) {
  clsreg::TrainingSet training;
  for (const auto& path : list_cloud_files(opt.input)) {
    training.instances.push_back(clsreg::read_cloud(path));
    training.labels.push_back(path.filename().string());
  }

  clsreg::TrainOptions topt;
  topt.allow_nonconverged = opt.allow_nonconverged;
  topt.threads = opt.effective_threads();
  topt.pca.seed = clsreg::mix_seed(opt.seed, 0x6c6174);
  if (canonical_arg != "auto") {
    try {
      std::size_t used = 0;
      topt.canonical_index = std::stoi(canonical_arg, &used);
      if (used != canonical_arg.size()) throw std::invalid_argument(canonical_arg);
    } catch (const std::exception&) {
      throw clsreg::ParseError("--canonical must be 'auto' or an index");
    }
  }

  clsreg::TrainResult trained;
  try {
    trained = clsreg::train_category(training, cpd_config_from(opt), topt);
  } catch (const clsreg::NonConvergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNonConverged;
  } catch (const std::invalid_argument&) {
    throw;  // bad arguments are usage errors, not training failures
  } catch (const std::exception& e) {
    std::cerr << "training failed: " << e.what() << "\n";
    return kExitTrainFailure;
  }

  trained.model.provenance = provenance_block("train", opt);
  trained.model.provenance["canonical"] = canonical_arg;
  trained.model.provenance["instances"] = training.labels;
  clsreg::write_json_file(opt.output, clsreg::model_to_json(trained.model));

  std::cout << "canonical: " << training.label(trained.canonical_index) << " (index "
            << trained.canonical_index << ")\n";
  std::cout << "latent dimension: " << trained.model.latent_dim << "\n";
  std::cout << "explained variance: " << trained.model.explained << "\n";
  for (std::size_t i = 0; i < trained.registrations.size(); ++i) {
    const auto& reg = trained.registrations[i];
    const clsreg::PointCloud deformed =
        clsreg::apply_deformation(reg.field, trained.model.canonical);
    std::cout << training.label(i) << ": residual "
              << clsreg::chamfer_error(deformed, training.instances[i]) << ", iterations "
              << reg.iterations << (reg.converged ? "" : " (not converged)") << "\n";
  }
  std::cout << "model written to " << opt.output << "\n";
  return kExitOk;
}

int cmd_infer(const CommonOptions& opt) {
  const clsreg::CategoryModel model =
      clsreg::model_from_json(clsreg::load_json_file(opt.model_path));
  const clsreg::PointCloud observation = clsreg::read_cloud(opt.input);

  const auto start = std::chrono::steady_clock::now();
  const clsreg::InferenceResult result =
      clsreg::infer(model, observation, inference_config_from(opt));
  const double wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();

  const fs::path prefix(opt.output);
  clsreg::write_ply(prefix.string() + ".ply", result.deformed);
  json out = clsreg::inference_result_to_json(result);
  out["provenance"] = provenance_block("infer", opt);
  clsreg::write_json_file(prefix.string() + ".json", out);

  std::cout << "energy: " << result.energy_trace.front() << " -> " << result.energy_trace.back()
            << " over " << result.iterations << " accepted steps\n";
  std::cout << "gradient norm: " << result.final_gradient_norm << "\n";
  std::cout << "converged: " << (result.converged ? "yes" : "no") << "\n";
  std::cout << "wall time: " << wall_ms << " ms\n";
  std::cout << "outputs: " << prefix.string() << ".ply, " << prefix.string() << ".json\n";

  if (!result.converged && !opt.allow_nonconverged) {
    std::cerr << "error: inference did not converge (use --allow-nonconverged to accept)\n";
    return kExitNonConverged;
  }
  return kExitOk;
}

int cmd_warp(const CommonOptions& opt, const std::string& result_path) {
  const clsreg::CategoryModel model =
      clsreg::model_from_json(clsreg::load_json_file(opt.model_path));
  const json rj = clsreg::load_json_file(result_path);

  clsreg::InferenceResult result;
  const auto& xj = rj.at("x");
  if (!xj.is_array() || static_cast<int>(xj.size()) != model.latent_dim)
    throw clsreg::ParseError(result_path + ": latent length does not match the model");
  result.pose.x.resize(model.latent_dim);
  for (int i = 0; i < model.latent_dim; ++i) result.pose.x(i) = xj[i].get<double>();
  result.pose.theta = clsreg::transform_from_json(rj.at("theta"));
  result.converged = rj.value("converged", false);
  result.field = clsreg::decode(model, result.pose.x);

  if (!result.converged && !opt.allow_nonconverged) {
    std::cerr << "error: inference result is not converged (use --allow-nonconverged)\n";
    return kExitNonConverged;
  }

  const clsreg::GraspAnnotation annotation =
      clsreg::annotation_from_json(clsreg::load_json_file(opt.input));
  const clsreg::WarpedGrasp warped = clsreg::warp_grasp(annotation, result);

  json out = clsreg::warped_to_json(warped);
  out["provenance"].update(provenance_block("warp", opt));  // keep the fit's x/theta
  clsreg::write_json_file(opt.output, out);
  for (const auto& w : warped.warnings) std::cout << "warning: " << w << "\n";
  std::cout << warped.poses.size() << " poses written to " << opt.output << "\n";
  return kExitOk;
}

int cmd_generate(const CommonOptions& opt, const std::string& latent_arg) {
  const clsreg::CategoryModel model =
      clsreg::model_from_json(clsreg::load_json_file(opt.model_path));

  Eigen::VectorXd x(model.latent_dim);
  if (!latent_arg.empty()) {
    std::vector<double> values;
    std::istringstream ls(latent_arg);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw clsreg::ParseError("--latent: cannot parse '" + cell + "'");
      }
    }
    if (static_cast<int>(values.size()) != model.latent_dim)
      throw clsreg::ParseError("--latent: expected " + std::to_string(model.latent_dim) +
                               " values, got " + std::to_string(values.size()));
    for (int i = 0; i < model.latent_dim; ++i) x(i) = values[static_cast<std::size_t>(i)];
  } else {
    // Random draw scaled to the training latitude per coordinate.
    clsreg::Rng rng(opt.seed);
    for (int i = 0; i < model.latent_dim; ++i) {
      const Eigen::VectorXd col = model.training_latents.col(i);
      const double mean = col.mean();
      const double sd = std::sqrt((col.array() - mean).square().sum() / col.size());
      x(i) = mean + sd * rng.normal();
    }
  }

  const clsreg::DeformationField field = clsreg::decode(model, x);
  const clsreg::PointCloud shape = clsreg::apply_deformation(field, model.canonical);
  if (!shape.all_finite()) throw std::runtime_error("generate: non-finite shape");
  clsreg::write_cloud(opt.output, shape);
  std::cout << "latent: [";
  for (int i = 0; i < model.latent_dim; ++i) std::cout << (i ? ", " : "") << x(i);
  std::cout << "]\nshape written to " << opt.output << "\n";
  return kExitOk;
}

int cmd_bench(const CommonOptions& opt, CLI::App* sub) {
  clsreg::ExperimentPlan plan = clsreg::plan_from_json(clsreg::load_json_file(opt.input));
  auto flag_given = [&](const std::string& name) {
    const CLI::Option* o = sub->get_option_no_throw(name);
    return o != nullptr && o->count() > 0;
  };
  if (flag_given("--seed")) plan.seed = opt.seed;
  if (flag_given("--threads")) plan.threads = opt.effective_threads();
  if (flag_given("--beta")) plan.cpd.beta = opt.beta;
  if (flag_given("--lambda")) plan.cpd.lambda = opt.lambda;
  if (flag_given("--omega")) plan.cpd.omega = opt.omega;
  if (flag_given("--sigma2")) plan.inference.sigma2 = opt.sigma2;
  if (opt.literal_eq12) plan.inference.direction = clsreg::EnergyDirection::LiteralEq12;

  const fs::path out_dir(opt.output);
  fs::create_directories(out_dir);

  const clsreg::RunResult run = clsreg::run_plan(plan);
  for (const auto& w : run.warnings) std::cout << "warning: " << w << "\n";

  const auto rows = clsreg::aggregate(run.records);
  {
    std::ofstream os(out_dir / "records.csv");
    os << clsreg::records_to_csv(run.records);
  }
  {
    std::ofstream os(out_dir / "summary.csv");
    os << clsreg::summary_to_csv(rows);
  }
  clsreg::write_json_file(out_dir / "summary.json", clsreg::summary_to_json(rows));
  {
    std::ofstream os(out_dir / "timings.csv");
    os << clsreg::timings_to_csv(run.records);
  }
  json prov = provenance_block("bench", opt);
  prov["plan"] = clsreg::plan_to_json(plan);
  prov["warnings"] = run.warnings;
  clsreg::write_json_file(out_dir / "provenance.json", prov);

  clsreg::CategoryModel model = run.model;
  model.provenance = prov;
  clsreg::write_json_file(out_dir / "model.json", clsreg::model_to_json(model));

  int failed = 0;
  for (const auto& r : run.records)
    if (!r.ok) ++failed;
  std::cout << run.records.size() << " trials, " << failed << " failed\n";
  std::cout << "outputs in " << out_dir.string() << "\n";
  if (run.any_failed) {
    std::cerr << "error: " << failed << " trial(s) errored\n";
    return kExitBenchTrialFailure;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Category-level shape registration: latent deformation spaces over CPD fields"};
  app.require_subcommand(1);

  CommonOptions opt;
  std::string canonical_arg = "auto";
  std::string latent_arg;
  std::string result_path;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", opt.seed, "Seed for all randomized steps");
    sub->add_option("--threads", opt.threads, "Worker threads (0 = logical cores)");
    sub->add_option("--beta", opt.beta, "Kernel width");
    sub->add_option("--lambda", opt.lambda, "Coherence weight");
    sub->add_option("--omega", opt.omega, "Outlier mass in [0,1)");
    sub->add_option("--sigma2", opt.sigma2, "Inference bandwidth (0 = auto)");
    sub->add_option("--config", opt.config_path, "JSON config file (defaults < file < flags)");
    sub->add_flag("--allow-nonconverged", opt.allow_nonconverged,
                  "Accept non-converged fits instead of failing");
    sub->add_flag("--literal-eq12", opt.literal_eq12,
                  "Use the literal printed objective (positive exponent, canonical-major)");
  };

  CLI::App* train = app.add_subcommand("train", "Build a category model from a directory of clouds");
  train->add_option("--input", opt.input, "Directory of training clouds (.ply/.csv)")->required();
  train->add_option("--output", opt.output, "Output model JSON path")->required();
  train->add_option("--canonical", canonical_arg, "Canonical instance: 'auto' or an index");
  add_common(train);

  CLI::App* infer = app.add_subcommand("infer", "Fit the model to an observed cloud");
  infer->add_option("--model", opt.model_path, "Model JSON")->required();
  infer->add_option("--input", opt.input, "Observed cloud (.ply/.csv)")->required();
  infer->add_option("--output", opt.output, "Output prefix (writes .ply and .json)")->required();
  add_common(infer);

  CLI::App* warp = app.add_subcommand("warp", "Warp a grasp annotation through a fitted result");
  warp->add_option("--model", opt.model_path, "Model JSON")->required();
  warp->add_option("--result", result_path, "Inference result JSON")->required();
  warp->add_option("--input", opt.input, "Grasp annotation JSON")->required();
  warp->add_option("--output", opt.output, "Output warped annotation JSON")->required();
  add_common(warp);

  CLI::App* generate = app.add_subcommand("generate", "Decode a latent vector into a shape");
  generate->add_option("--model", opt.model_path, "Model JSON")->required();
  generate->add_option("--latent", latent_arg, "Comma-separated latent coordinates");
  generate->add_option("--output", opt.output, "Output cloud (.ply/.csv)")->required();
  add_common(generate);

  CLI::App* bench = app.add_subcommand("bench", "Run an experiment plan");
  bench->add_option("--input", opt.input, "Plan JSON")->required();
  bench->add_option("--output", opt.output, "Output directory")->required();
  add_common(bench);

  CLI::App* active = nullptr;
  try {
    app.parse(argc, argv);
    active = app.get_subcommands().front();
    merge_config_file(opt, active);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (active == train) return cmd_train(opt, canonical_arg);
    if (active == infer) return cmd_infer(opt);
    if (active == warp) return cmd_warp(opt, result_path);
    if (active == generate) return cmd_generate(opt, latent_arg);
    if (active == bench) return cmd_bench(opt, bench);
    std::cerr << "error: no subcommand\n";
    return kExitUsage;
  } catch (const clsreg::NonConvergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNonConverged;
  } catch (const clsreg::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}
