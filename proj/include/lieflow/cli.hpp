#pragma once

// The `lieflow` command line: generate, fit, eval, roll.
// run_cli is callable in-process so tests can drive it directly.

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lieflow/checkpoint.hpp"
#include "lieflow/rollout.hpp"

namespace lieflow {

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitIo = 3, kExitNumeric = 4, kExitFormat = 5 };

namespace cli {

namespace fs = std::filesystem;

/// `data.lft` -> `data.truth.lft`
inline std::string sidecar_path(const std::string& dataset) {
  fs::path p(dataset);
  return (p.parent_path() / (p.stem().string() + ".truth.lft")).string();
}

inline EStepMethod parse_estep(const std::string& s) {
  if (s == "quadrature") return EStepMethod::quadrature;
  if (s == "fixed-point") return EStepMethod::fixed_point;
  if (s == "mc") return EStepMethod::monte_carlo;
  throw DimensionError("unknown e-step method '" + s + "'");
}

struct GenerateArgs {
  std::string kind = "rotation2d";
  Index n = 500;
  std::uint64_t seed = 0;
  double lambda_scale = 0.05;
  double noise_std = 0.0;
  double latent_noise_std = 0.0;
  Index d = 2;
  Index j = 1;
  std::string image = "none";
  Index height = 1;
  Index width = 16;
  bool first_order = false;
  std::string out = "dataset.lft";
};

struct FitArgs {
  std::string data;
  std::string estimator = "dynamics";
  Index d = 2;
  Index j = 1;
  std::string estep = "fixed-point";
  int max_iters = 500;
  double tol = 1e-8;
  unsigned threads = 0;
  std::uint64_t seed = 0;
  bool no_orthogonalize = false;
  double variance_threshold = 0.99;
  bool estimate_lambda = false;
  bool freeze_lambda = false;
  Index grid_points = 48;
  Index mc_samples = 100000;
  int epochs = 50;
  double step_size = 1e-3;
  Index batch_size = 32;
  bool momentum = false;
  std::vector<Index> enc_hidden;
  std::vector<Index> dec_hidden;
  double obs_noise_var = 0.01;
  std::string out = "checkpoint.lft";
  std::string trace;
};

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out = "metrics.csv";
};

struct RollArgs {
  std::string checkpoint;
  std::string data;
  Index index = 0;
  std::string mode = "extrapolate";
  Index steps = 11;
  double t_max = 2.0;
  bool first_order = false;
  std::vector<double> lambda;
  std::string out = "trajectory.lft";
};

inline int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  SequenceSpec spec;
  spec.kind = parse_group_kind(a.kind);
  spec.latent_dim = a.d;
  spec.generator_count = a.j;
  spec.image_height = a.height;
  spec.image_width = a.width;
  spec.lambda_scale = a.lambda_scale;
  spec.noise_std = a.noise_std;
  spec.latent_noise_std = a.latent_noise_std;
  spec.pair_count = a.n;
  spec.seed = a.seed;
  spec.first_order = a.first_order;
  TensorFile data, truth;
  nlohmann::json summary;
  if (a.image == "none") {
    auto [pairs, gt] = generate_latent_pairs(spec);
    data = dataset_file(pairs, gt);
    truth = truth_file(gt);
    summary["D"] = nullptr;
  } else if (a.image == "linear" || a.image == "raster") {
    auto [pairs, gt] = generate_image_pairs(spec, a.image == "linear" ? Embedding::linear : Embedding::raster);
    data = dataset_file(pairs, gt);
    truth = truth_file(gt);
    summary["D"] = pairs.image_dim();
  } else {
    throw DimensionError("unknown image embedding '" + a.image + "'");
  }
  for (auto* f : {&data, &truth}) {
    f->attributes["kind"] = a.kind;
    f->attributes["seed"] = a.seed;
    f->attributes["lambda_scale"] = a.lambda_scale;
    f->attributes["noise_std"] = a.noise_std;
    f->attributes["embedding"] = a.image;
  }
  write_tensor_file(a.out, data);
  write_tensor_file(sidecar_path(a.out), truth);
  summary["command"] = "generate";
  summary["kind"] = a.kind;
  summary["N"] = a.n;
  summary["d"] = a.d;
  summary["J"] = truth.stack("true_G").size();
  summary["seed"] = a.seed;
  summary["path"] = a.out;
  summary["truth"] = sidecar_path(a.out);
  out << summary.dump() << '\n';
  return kExitOk;
}

inline void write_trace(const std::string& path, const std::vector<double>& trace) {
  CsvWriter csv(path, {"iter", "objective"});
  for (size_t i = 0; i < trace.size(); ++i) csv.row({std::to_string(i + 1), format_real(trace[i])});
}

inline int cmd_fit(const FitArgs& a, std::ostream& out) {
  const TensorFile data = read_tensor_file(a.data);
  if (a.j < 1) throw DimensionError("--j must be at least 1");
  TensorFile ckpt;
  std::vector<double> trace;
  bool converged = false;
  int iterations = 0;
  if (a.estimator == "dynamics") {
    const PairDataset pairs = load_pair_dataset(data);
    EmConfig cfg;
    cfg.initial_generators = a.j;
    cfg.max_iters = a.max_iters;
    cfg.tolerance = a.tol;
    cfg.orthogonalize = !a.no_orthogonalize;
    cfg.variance_threshold = a.variance_threshold;
    cfg.estimate_lambda = a.estimate_lambda;
    cfg.seed = a.seed;
    cfg.threads = a.threads;
    auto r = fit_dynamics(pairs, cfg);
    ckpt = checkpoint_of(r.model);
    trace = r.trace;
    converged = r.converged;
    iterations = r.iterations;
  } else if (a.estimator == "ppca") {
    const ImagePairDataset images = load_image_dataset(data);
    PpcaConfig cfg;
    cfg.latent_dim = a.d;
    cfg.initial_generators = a.j;
    cfg.estep.method = parse_estep(a.estep);
    cfg.estep.freeze_coefficients = a.freeze_lambda;
    cfg.estep.grid_points = a.grid_points;
    cfg.estep.samples = a.mc_samples;
    cfg.estep.seed = a.seed;
    cfg.max_iters = a.max_iters;
    cfg.tolerance = a.tol;
    cfg.orthogonalize = !a.no_orthogonalize;
    cfg.variance_threshold = a.variance_threshold;
    cfg.estimate_lambda = a.estimate_lambda;
    cfg.seed = a.seed;
    cfg.threads = a.threads;
    auto r = fit_ppca(images, cfg);
    ckpt = checkpoint_of(r.model);
    trace = r.trace;
    converged = r.converged;
    iterations = r.iterations;
  } else if (a.estimator == "npca") {
    const ImagePairDataset images = load_image_dataset(data);
    NpcaConfig cfg;
    cfg.latent_dim = a.d;
    cfg.initial_generators = a.j;
    cfg.encoder_hidden = a.enc_hidden;
    cfg.decoder_hidden = a.dec_hidden;
    cfg.step_size = a.step_size;
    cfg.momentum = a.momentum;
    cfg.batch_size = a.batch_size;
    cfg.epochs = a.epochs;
    cfg.seed = a.seed;
    cfg.obs_noise_var = a.obs_noise_var;
    cfg.freeze_coefficients = a.freeze_lambda;
    cfg.estimate_lambda = a.estimate_lambda;
    cfg.orthogonalize = !a.no_orthogonalize;
    cfg.variance_threshold = a.variance_threshold;
    cfg.threads = a.threads;
    auto r = fit_npca(images, cfg);
    ckpt = checkpoint_of(r.model);
    trace = r.trace;
    iterations = r.epochs;
    converged = false;
  } else {
    throw DimensionError("unknown estimator '" + a.estimator + "'");
  }
  ckpt.attributes["iterations"] = iterations;
  ckpt.attributes["converged"] = converged;
  ckpt.attributes["seed"] = a.seed;
  if (!trace.empty()) ckpt.attributes["final_objective"] = format_real(trace.back());
  write_tensor_file(a.out, ckpt);
  const std::string trace_path =
      a.trace.empty() ? (fs::path(a.out).parent_path() / "trace.csv").string() : a.trace;
  write_trace(trace_path, trace);
  out << "fit " << a.estimator << " converged=" << (converged ? "true" : "false") << " iterations=" << iterations
      << " objective=" << (trace.empty() ? std::string("nan") : format_real(trace.back())) << '\n';
  return kExitOk;
}

/// Least-squares map M with true latents ~ M * estimated latents, used to
/// express learned generators in ground-truth coordinates.
inline Matrix latent_alignment(const Matrix& estimated, const Matrix& truth) {
  const Matrix gram = estimated.transpose() * estimated;
  return SpdFactor(gram).solve(estimated.transpose() * truth).transpose();
}

inline GeneratorBasis transform_basis(const GeneratorBasis& basis, const Matrix& m) {
  const Eigen::PartialPivLU<Matrix> lu(m);
  std::vector<Matrix> gens;
  for (const Matrix& g : basis.generators()) gens.push_back(m * g * lu.inverse());
  return GeneratorBasis(std::move(gens));
}

inline int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  const TensorFile ckpt = read_tensor_file(a.checkpoint);
  const TensorFile data = read_tensor_file(a.data);
  const std::string estimator = estimator_of(ckpt);
  std::optional<TensorFile> truth;
  const std::string side = sidecar_path(a.data);
  if (fs::exists(side)) {
    truth = read_tensor_file(side);
  } else {
    err << "warning: no ground-truth sidecar at " << side << "; recovery metrics omitted\n";
  }
  std::vector<std::pair<std::string, double>> metrics;
  // a vanished basis spans nothing, so the angle is undefined
  auto add_angle = [&](const GeneratorBasis& learned, const GeneratorBasis& true_g) {
    if (learned.norm() == 0.0) {
      err << "warning: learned generators are all zero; subspace angle omitted\n";
      return;
    }
    metrics.emplace_back("subspace_angle_rad", subspace_angle(learned, true_g));
  };
  if (estimator == "dynamics") {
    const DynamicsModel model = load_dynamics(ckpt);
    const PairDataset pairs = load_pair_dataset(data);
    detail::require_dims(pairs.latent_dim() == model.latent_dim(), "checkpoint and dataset latent dims differ");
    if (truth) add_angle(model.basis, GeneratorBasis(truth->stack("true_G")));
    double lp = 0.0;
    for (Index i = 0; i < pairs.count(); ++i) lp += predictive_log_density(model, pairs.first(i), pairs.second(i));
    metrics.emplace_back("heldout_predictive_log_density", lp / static_cast<double>(pairs.count()));
  } else if (estimator == "ppca" || estimator == "npca") {
    const ImagePairDataset images = load_image_dataset(data);
    std::optional<PpcaModel> ppca;
    std::optional<NpcaModel> npca;
    if (estimator == "ppca") ppca = load_ppca(ckpt);
    else npca = load_npca(ckpt);
    const Index d = ppca ? ppca->latent_dim() : npca->latent_dim();
    detail::require_dims((ppca ? ppca->image_dim() : npca->image_dim()) == images.image_dim(),
                         "checkpoint and dataset image dims differ");
    Matrix means(images.count(), d);
    double sq = 0.0;
    for (Index i = 0; i < images.count(); ++i) {
      for (int frame = 0; frame < 2; ++frame) {
        const Vector x = frame == 0 ? images.first(i) : images.second(i);
        Vector z, xr;
        if (ppca) {
          z = posterior_z_given_x(*ppca, x).mean();
          xr = ppca->loading * z + ppca->data_mean;
        } else {
          z = encode_diag(*npca, x).mean;
          xr = decode(*npca, z);
        }
        if (frame == 0) means.row(i) = z.transpose();
        sq += (xr - x).squaredNorm();
      }
    }
    if (truth) {
      const GeneratorBasis true_g(truth->stack("true_G"));
      const Matrix latents = truth->matrix("latent_i");
      if (latents.cols() == d && latents.rows() == images.count()) {
        const Matrix m = latent_alignment(means, latents);
        const GeneratorBasis learned = ppca ? ppca->dynamics.basis : npca->dynamics.basis;
        add_angle(transform_basis(learned, m), true_g);
      } else {
        err << "warning: ground-truth latent dim differs from the model; subspace angle omitted\n";
      }
    }
    metrics.emplace_back("reconstruction_mse", sq / static_cast<double>(2 * images.count() * images.image_dim()));
  } else {
    throw FormatError("unknown estimator '" + estimator + "' in checkpoint");
  }
  if (ckpt.attributes.contains("final_objective"))
    metrics.emplace_back("final_objective", std::stod(ckpt.attributes["final_objective"].get<std::string>()));
  CsvWriter csv(a.out, {"metric", "value"});
  for (const auto& [k, v] : metrics) csv.row({k, format_real(v)});
  for (const auto& [k, v] : metrics) out << k << "=" << format_real(v) << '\n';
  return kExitOk;
}

inline int cmd_roll(const RollArgs& a, std::ostream& out) {
  const TensorFile ckpt = read_tensor_file(a.checkpoint);
  const TensorFile data = read_tensor_file(a.data);
  const std::string estimator = estimator_of(ckpt);
  if (a.steps < 2) throw DimensionError("--steps must be at least 2");
  double t_max = a.t_max;
  if (a.mode == "interpolate") {
    t_max = 1.0;
  } else if (a.mode == "extrapolate") {
    if (!(t_max > 1.0)) throw DimensionError("extrapolation needs --t-max > 1");
  } else {
    throw DimensionError("unknown roll mode '" + a.mode + "'");
  }

  std::optional<PpcaModel> ppca;
  std::optional<NpcaModel> npca;
  DynamicsModel dyn;
  Vector z0, z1;
  if (estimator == "dynamics") {
    dyn = load_dynamics(ckpt);
    const PairDataset pairs = load_pair_dataset(data);
    if (a.index < 0 || a.index >= pairs.count()) throw DimensionError("--index out of range");
    z0 = pairs.first(a.index);
    z1 = pairs.second(a.index);
  } else {
    const ImagePairDataset images = load_image_dataset(data);
    if (a.index < 0 || a.index >= images.count()) throw DimensionError("--index out of range");
    if (estimator == "ppca") {
      ppca = load_ppca(ckpt);
      dyn = ppca->dynamics;
      z0 = posterior_z_given_x(*ppca, images.first(a.index)).mean();
      z1 = posterior_z_given_x(*ppca, images.second(a.index)).mean();
    } else if (estimator == "npca") {
      npca = load_npca(ckpt);
      dyn = npca->dynamics;
      z0 = encode_diag(*npca, images.first(a.index)).mean;
      z1 = encode_diag(*npca, images.second(a.index)).mean;
    } else {
      throw FormatError("unknown estimator '" + estimator + "' in checkpoint");
    }
  }
  detail::require_dims(z0.size() == dyn.latent_dim(), "checkpoint and dataset latent dims differ");
  Vector lambda;
  if (!a.lambda.empty()) {
    detail::require_dims(static_cast<Index>(a.lambda.size()) == dyn.count(), "--lambda needs one value per generator");
    lambda = Eigen::Map<const Vector>(a.lambda.data(), static_cast<Index>(a.lambda.size()));
  } else {
    lambda = infer_coefficients(dyn, z0, z1, !a.first_order);
  }
  std::vector<double> times(static_cast<size_t>(a.steps));
  for (Index k = 0; k < a.steps; ++k) times[static_cast<size_t>(k)] = t_max * static_cast<double>(k) / static_cast<double>(a.steps - 1);
  const Matrix zs = rollout(dyn.basis, lambda, z0, times);

  TensorFile traj;
  traj.attributes["estimator"] = estimator;
  traj.attributes["mode"] = a.mode;
  traj.put_vector("t", Eigen::Map<const Vector>(times.data(), a.steps));
  traj.put("z", zs);
  traj.put_vector("lambda", lambda);
  Matrix xs;
  if (ppca || npca) {
    const Index D = ppca ? ppca->image_dim() : npca->image_dim();
    xs.resize(a.steps, D);
    for (Index k = 0; k < a.steps; ++k) {
      const Vector z = zs.row(k).transpose();
      xs.row(k) = (ppca ? Vector(ppca->loading * z + ppca->data_mean) : decode(*npca, z)).transpose();
    }
    traj.put("x", xs);
  }
  write_tensor_file(a.out, traj);
  const std::string csv_path = fs::path(a.out).replace_extension(".csv").string();
  std::vector<std::string> header{"step", "t", "latent_norm"};
  if (xs.size() > 0) header.push_back("image_norm");
  CsvWriter csv(csv_path, header);
  for (Index k = 0; k < a.steps; ++k) {
    std::vector<std::string> row{std::to_string(k), format_real(times[static_cast<size_t>(k)]), format_real(zs.row(k).norm())};
    if (xs.size() > 0) row.push_back(format_real(xs.row(k).norm()));
    csv.row(row);
  }
  out << "roll " << a.mode << " steps=" << a.steps << " t_max=" << format_real(t_max) << " lambda=";
  for (Index j = 0; j < lambda.size(); ++j) out << (j ? "," : "") << format_real(lambda(j));
  out << '\n';
  return kExitOk;
}

}  // namespace cli

/// Runs the command line; returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Learn Lie-group generators of latent and image pair sequences", "lieflow"};
  app.set_config("--config", "", "TOML/INI file with option values (command-line flags take precedence)");
  app.require_subcommand(1);

  cli::GenerateArgs g;
  auto* gen = app.add_subcommand("generate", "Write a synthetic pair dataset and its ground-truth sidecar");
  gen->add_option("--kind", g.kind, "rotation2d | cyclic_shift | contrast | latent_random")->capture_default_str();
  gen->add_option("--n", g.n, "Number of pairs")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--seed", g.seed, "Random seed")->capture_default_str();
  gen->add_option("--lambda-scale", g.lambda_scale, "Std of the coefficient draws")->capture_default_str()->check(CLI::NonNegativeNumber);
  gen->add_option("--noise-std", g.noise_std, "Latent noise (latent pairs) or pixel noise (images)")->capture_default_str()->check(CLI::NonNegativeNumber);
  gen->add_option("--latent-noise-std", g.latent_noise_std, "Transition noise for image pairs")->capture_default_str()->check(CLI::NonNegativeNumber);
  gen->add_option("--d", g.d, "Latent dimension")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--j", g.j, "Generator count (latent_random)")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--image", g.image, "none | linear | raster")->capture_default_str();
  gen->add_option("--height", g.height, "Image height")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--width", g.width, "Image width")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_flag("--first-order", g.first_order, "Use the first-order transition instead of the exponential");
  gen->add_option("--out", g.out, "Dataset path")->capture_default_str();

  cli::FitArgs f;
  auto* fit = app.add_subcommand("fit", "Fit an estimator and write a checkpoint and trace.csv");
  fit->add_option("--data", f.data, "Dataset path")->required();
  fit->add_option("--estimator", f.estimator, "dynamics | ppca | npca")->capture_default_str();
  fit->add_option("--d", f.d, "Latent dimension (ppca, npca)")->capture_default_str()->check(CLI::PositiveNumber);
  fit->add_option("--j", f.j, "Initial generator count")->capture_default_str();
  fit->add_option("--estep", f.estep, "quadrature | fixed-point | mc")->capture_default_str();
  fit->add_option("--max-iters", f.max_iters, "EM iteration cap")->capture_default_str()->check(CLI::PositiveNumber);
  fit->add_option("--tol", f.tol, "Relative objective tolerance")->capture_default_str()->check(CLI::NonNegativeNumber);
  fit->add_option("--threads", f.threads, "Worker threads (0: all cores)")->capture_default_str();
  fit->add_option("--seed", f.seed, "Random seed")->capture_default_str();
  fit->add_flag("--no-orthogonalize", f.no_orthogonalize, "Skip the generator orthogonalization step");
  fit->add_option("--variance-threshold", f.variance_threshold, "Retained variance when orthogonalizing")->capture_default_str();
  fit->add_flag("--estimate-lambda", f.estimate_lambda, "Estimate the coefficient prior covariance");
  fit->add_flag("--freeze-lambda", f.freeze_lambda, "Hold the coefficients at zero");
  fit->add_option("--grid-points", f.grid_points, "Quadrature points per dimension")->capture_default_str();
  fit->add_option("--mc-samples", f.mc_samples, "Samples per pair for the mc E-step")->capture_default_str();
  fit->add_option("--epochs", f.epochs, "Training epochs (npca)")->capture_default_str();
  fit->add_option("--step-size", f.step_size, "Gradient step size (npca)")->capture_default_str();
  fit->add_option("--batch-size", f.batch_size, "Minibatch size (npca)")->capture_default_str();
  fit->add_flag("--momentum", f.momentum, "Use momentum 0.9 (npca)");
  fit->add_option("--enc-hidden", f.enc_hidden, "Encoder hidden widths (npca)")->delimiter(',');
  fit->add_option("--dec-hidden", f.dec_hidden, "Decoder hidden widths (npca)")->delimiter(',');
  fit->add_option("--obs-noise-var", f.obs_noise_var, "Observation noise variance (npca)")->capture_default_str();
  fit->add_option("--out", f.out, "Checkpoint path")->capture_default_str();
  fit->add_option("--trace", f.trace, "Trace CSV path (default: trace.csv beside the checkpoint)");

  cli::EvalArgs e;
  auto* ev = app.add_subcommand("eval", "Write metrics.csv for a checkpoint on a dataset");
  ev->add_option("--checkpoint", e.checkpoint, "Checkpoint path")->required();
  ev->add_option("--data", e.data, "Dataset path (sidecar read from <stem>.truth.lft)")->required();
  ev->add_option("--out", e.out, "Metrics path")->capture_default_str();

  cli::RollArgs r;
  auto* roll = app.add_subcommand("roll", "Interpolate or extrapolate along the learned transformation");
  roll->add_option("--checkpoint", r.checkpoint, "Checkpoint path")->required();
  roll->add_option("--data", r.data, "Dataset holding the seed pair")->required();
  roll->add_option("--index", r.index, "Pair index")->capture_default_str();
  roll->add_option("--mode", r.mode, "interpolate | extrapolate")->capture_default_str();
  roll->add_option("--steps", r.steps, "Grid points in t")->capture_default_str();
  roll->add_option("--t-max", r.t_max, "Largest t when extrapolating")->capture_default_str();
  roll->add_flag("--first-order", r.first_order, "Use the first-order coefficient estimate without refinement");
  roll->add_option("--lambda", r.lambda, "Coefficients to use instead of inferring them")->delimiter(',');
  roll->add_option("--out", r.out, "Trajectory path (CSV written beside it)")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  try {
    if (*gen) return cli::cmd_generate(g, out);
    if (*fit) return cli::cmd_fit(f, out);
    if (*ev) return cli::cmd_eval(e, out, err);
    if (*roll) return cli::cmd_roll(r, out);
  } catch (const DimensionError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const IoError& ex) {
    err << "I/O error: " << ex.what() << '\n';
    return kExitIo;
  } catch (const FormatError& ex) {
    err << "format error: " << ex.what() << '\n';
    return kExitFormat;
  } catch (const nlohmann::json::exception& ex) {
    err << "format error: " << ex.what() << '\n';
    return kExitFormat;
  } catch (const ConvergenceError& ex) {
    err << "numeric error: " << ex.what() << " (residual " << ex.residual() << ")\n";
    return kExitNumeric;
  } catch (const NumericError& ex) {
    err << "numeric error: " << ex.what();
    if (ex.condition() > 0) err << " (condition " << ex.condition() << ")";
    err << '\n';
    return kExitNumeric;
  }
  return kExitUsage;
}

}  // namespace lieflow
