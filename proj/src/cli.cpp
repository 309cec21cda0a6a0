#include "tarflow/cli.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "tarflow/checkpoint.hpp"
#include "tarflow/data.hpp"
#include "tarflow/errors.hpp"
#include "tarflow/evaluation.hpp"
#include "tarflow/run_config.hpp"
#include "tarflow/sampling.hpp"
#include "tarflow/training.hpp"

namespace tarflow {
namespace {

namespace fs = std::filesystem;

struct TrainFlags {
  std::string config;
  std::optional<std::string> output;
  std::optional<std::string> dataset;
  std::optional<std::size_t> dataset_size;
  std::optional<std::string> model;
  std::optional<std::size_t> classes;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> precision;
  std::optional<std::string> flips;
  std::optional<std::string> resume;
  bool quiet = false;
};

struct SampleFlags {
  std::string config;
  std::optional<std::string> checkpoint;
  std::optional<std::string> output;
  std::optional<std::size_t> count;
  std::vector<std::size_t> labels;
  std::optional<std::string> mode;
  std::optional<double> weight;
  std::optional<double> tau;
  std::optional<std::string> schedule;
  std::optional<std::string> normalizer;
  bool denoise = false;
  std::optional<double> sigma;
  bool trajectory = false;
  std::optional<std::uint64_t> seed;
  bool no_clamp = false;
};

struct EvalFlags {
  std::string checkpoint;
  std::string dataset;
  std::size_t count = 4096;
  std::uint64_t data_seed = 0;
  std::size_t draws = 1;
  std::uint64_t seed = 0;
  std::string output;
};

struct DenoiseFlags {
  std::string checkpoint;
  std::string input;
  std::string output;
  std::optional<double> sigma;
  std::optional<std::size_t> label;
};

RunConfig base_config(const std::string& path) {
  return path.empty() ? RunConfig{} : RunConfig::load(path);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  const std::string text = j.dump(2) + "\n";
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string frame_name(const std::string& stem, std::size_t index, int digits,
                       const std::string& ext) {
  std::ostringstream name;
  name << stem << std::setw(digits) << std::setfill('0') << index << ext;
  return name.str();
}

std::string image_ext(const TarFlowModel& model) {
  return model.config().image_channels == 3 ? ".ppm" : ".pgm";
}

TarFlowModel load_model(const fs::path& path) {
  if (path.empty()) throw ParameterError("no checkpoint given (--checkpoint or paths.checkpoint)");
  return load_checkpoint(path).model;
}

// ---- train -------------------------------------------------------------------

int cmd_train(const TrainFlags& f, std::ostream& out) {
  RunConfig cfg = base_config(f.config);
  if (f.model) {
    try {
      cfg.model.apply_tag(*f.model);
    } catch (const ParameterError& e) {
      throw ParameterError(std::string("--model: ") + e.what());
    }
  }
  if (f.classes) cfg.model.num_classes = *f.classes;
  if (f.dataset) cfg.train.dataset = *f.dataset;
  if (f.dataset_size) cfg.train.dataset_size = *f.dataset_size;
  if (f.epochs) cfg.train.epochs = *f.epochs;
  if (f.batch_size) cfg.train.batch_size = *f.batch_size;
  if (f.seed) cfg.train.seed = *f.seed;
  if (f.precision) cfg.train.precision = *f.precision;
  if (f.flips) cfg.train.flips = *f.flips;
  if (f.output) cfg.paths.output_dir = *f.output;
  if (f.resume) cfg.paths.resume = *f.resume;
  cfg.validate();

  const Dataset data = load_dataset(cfg.train.dataset, cfg.train.dataset_size, cfg.train.seed);
  cfg.model.image_channels = data.channels;
  cfg.model.image_height = data.height;
  cfg.model.image_width = data.width;
  if (cfg.model.num_classes > 0 && !data.labeled()) {
    throw ParameterError("config field 'model.num_classes': " +
                         std::to_string(cfg.model.num_classes) + " classes but dataset '" +
                         cfg.train.dataset + "' has no labels");
  }
  if (data.labeled() && cfg.model.num_classes > 0 && data.num_classes > cfg.model.num_classes) {
    throw ParameterError("config field 'model.num_classes': dataset has " +
                         std::to_string(data.num_classes) + " classes, config allows " +
                         std::to_string(cfg.model.num_classes));
  }
  cfg.validate();

  TrainState state;
  if (!cfg.paths.resume.empty()) {
    state = restore_train_state(load_checkpoint(cfg.paths.resume));
    if (!(state.model.config() == cfg.model)) {
      throw ParameterError("resume checkpoint holds model " + state.model.config().tag() +
                           " on " + std::to_string(state.model.config().image_height) + "x" +
                           std::to_string(state.model.config().image_width) +
                           " images, which differs from the configured model " +
                           cfg.model.tag());
    }
  } else {
    state = TrainState::fresh(cfg.model, cfg.train.seed, parse_precision(cfg.train.precision));
  }

  TrainOptions opt;
  opt.batch_size = cfg.train.batch_size;
  opt.epochs = cfg.train.epochs;
  opt.lr.peak = cfg.train.lr;
  opt.lr.floor = cfg.train.lr_floor;
  opt.adamw.weight_decay = cfg.train.weight_decay;
  opt.clip_norm = cfg.train.clip_norm;
  opt.flips = cfg.train.flips == "on"    ? TrainOptions::Flips::on
              : cfg.train.flips == "off" ? TrainOptions::Flips::off
                                         : TrainOptions::Flips::automatic;
  opt.output_dir = cfg.paths.output_dir;
  opt.verbose = !f.quiet;

  fs::create_directories(cfg.paths.output_dir);
  write_json(cfg.paths.output_dir / "config.json", cfg.to_json());
  if (!f.quiet) {
    out << "training " << cfg.model.tag() << " on " << data.size() << " images "
        << data.channels << "x" << data.height << "x" << data.width << ", "
        << state.model.parameter_count() << " parameters\n";
  }
  train(data, state, opt);
  if (!f.quiet) out << "checkpoints in " << cfg.paths.output_dir.string() << "\n";
  return 0;
}

// ---- sample ------------------------------------------------------------------

int cmd_sample(const SampleFlags& f, std::ostream& out) {
  RunConfig cfg = base_config(f.config);
  SampleSection& s = cfg.sample;
  if (f.checkpoint) cfg.paths.checkpoint = *f.checkpoint;
  if (f.output) cfg.paths.output_dir = *f.output;
  if (f.count) s.count = *f.count;
  if (!f.labels.empty()) s.labels = f.labels;
  if (f.weight) s.guidance.weight = *f.weight;
  if (f.tau) s.guidance.temperature = *f.tau;
  if (f.schedule) s.guidance.schedule = parse_guidance_schedule(*f.schedule);
  if (f.normalizer) s.guidance.normalizer = parse_schedule_normalizer(*f.normalizer);
  if (f.mode) {
    s.guidance.mode = parse_guidance_mode(*f.mode);
  } else if ((f.weight || f.tau) && s.guidance.mode == GuidanceMode::none &&
             s.guidance.weight > 0.0) {
    // A weight without a mode: temperature implies the unconditional
    // reference, class labels the conditional one.
    s.guidance.mode = f.tau || s.labels.empty() ? GuidanceMode::unconditional
                                                : GuidanceMode::conditional;
  }
  if (f.denoise) s.denoise = true;
  if (f.sigma) s.denoise_sigma = *f.sigma;
  if (f.trajectory) s.trajectory = true;
  if (f.seed) s.seed = *f.seed;
  if (f.no_clamp) s.alpha_clamp = 0.0;
  cfg.validate();

  const TarFlowModel model = load_model(cfg.paths.checkpoint);
  cfg.model = model.config();
  SampleOptions opt;
  opt.count = s.count;
  opt.labels = s.labels;
  opt.guidance = s.guidance;
  opt.denoise = s.denoise;
  opt.denoise_sigma = s.denoise_sigma;
  opt.trajectory = s.trajectory;
  opt.seed = s.seed;
  opt.inverse = InverseOptions{s.alpha_clamp > 0.0, s.alpha_clamp};
  const SampleResult result = sample(model, opt);

  const fs::path dir = cfg.paths.output_dir;
  fs::create_directories(dir);
  write_json(dir / "sample_config.json", cfg.to_json());
  const std::string ext = image_ext(model);
  for (std::size_t i = 0; i < result.images.size(); ++i) {
    write_image(result.images[i], dir / frame_name("sample_", i, 4, ext));
  }
  write_image(tile_images(result.images), dir / ("grid" + ext));
  for (std::size_t i = 0; i < result.trajectories.size(); ++i) {
    const auto& frames = result.trajectories[i];
    for (std::size_t k = 0; k < frames.size(); ++k) {
      write_image(frames[k],
                  dir / (frame_name("trajectory_", i, 4, "") + frame_name("_", k, 2, ext)));
    }
  }
  out << "wrote " << result.images.size() << " samples to " << dir.string() << "\n";
  return 0;
}

// ---- eval-bpd ----------------------------------------------------------------

int cmd_eval(const EvalFlags& f, std::ostream& out) {
  const TarFlowModel model = load_model(f.checkpoint);
  const Dataset data = load_dataset(f.dataset, f.count, f.data_seed);
  BpdOptions opt;
  opt.draws = f.draws;
  opt.seed = f.seed;
  const BpdReport report = bpd(data, model, opt);
  const std::string text = report.to_json();
  if (!f.output.empty()) {
    const std::string line = text + "\n";
    write_file(f.output, std::vector<std::uint8_t>(line.begin(), line.end()));
  }
  out << text << "\n";
  return 0;
}

// ---- denoise -----------------------------------------------------------------

int cmd_denoise(const DenoiseFlags& f, std::ostream& out) {
  const TarFlowModel model = load_model(f.checkpoint);
  const ModelConfig& c = model.config();
  double sigma = 0.0;
  if (f.sigma) {
    sigma = *f.sigma;
  } else if (c.noise.kind == NoiseKind::gaussian) {
    sigma = c.noise.magnitude;
  } else {
    throw ParameterError("--sigma is required for a model trained with " + c.noise.tag());
  }
  Tensor image = read_image(f.input);
  if (image.dim(0) != c.image_channels || image.dim(1) < c.image_height ||
      image.dim(2) < c.image_width || c.image_height != c.image_width) {
    throw ShapeError("input image " + to_string(image.shape()) + " does not fit model images " +
                     std::to_string(c.image_channels) + "x" + std::to_string(c.image_height) +
                     "x" + std::to_string(c.image_width));
  }
  image = center_crop(image, c.image_height);
  if (f.label && c.num_classes == 0) {
    throw ParameterError("--class given for an unconditional model");
  }
  if (f.label && *f.label > c.num_classes) {
    throw ParameterError("--class " + std::to_string(*f.label) + " out of range for " +
                         std::to_string(c.num_classes) + " classes");
  }
  write_image(denoise(model, image, sigma, f.label), f.output);
  out << "wrote " << f.output << "\n";
  return 0;
}

// ---- info --------------------------------------------------------------------

int cmd_info(const std::string& path, bool as_json, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(path);
  const ModelConfig& c = ckpt.model.config();
  nlohmann::ordered_json j;
  j["format_version"] = kCheckpointVersion;
  j["tag"] = c.tag();
  j["image"] = {c.image_channels, c.image_height, c.image_width};
  j["sequence"] = {ckpt.model.seq_len(), ckpt.model.token_dim()};
  j["num_classes"] = c.num_classes;
  j["label_dropout"] = c.label_dropout;
  j["vp_mode"] = c.vp_mode;
  j["precision"] = ckpt.model.precision() == Precision::f32 ? "f32" : "f64";
  j["parameters"] = ckpt.model.parameter_count();
  j["step"] = ckpt.step;
  j["best_loss"] = std::isfinite(ckpt.best_loss) ? nlohmann::ordered_json(ckpt.best_loss)
                                                 : nlohmann::ordered_json(nullptr);
  j["optimizer_state"] = ckpt.optimizer.has_value();
  if (as_json) {
    out << j.dump(2) << "\n";
    return 0;
  }
  for (const auto& [key, value] : j.items()) {
    out << std::left << std::setw(16) << key << value.dump() << "\n";
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Transformer autoregressive normalizing flow: train, sample, evaluate."};
  app.name("tarflow");
  app.require_subcommand(1);
  app.fallthrough();
  bool deterministic = false;
  app.add_flag("--deterministic", deterministic, "Single-threaded, ordered execution");

  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoints");
  train_cmd->add_option("-c,--config", tf.config, "JSON run config")->check(CLI::ExistingFile);
  train_cmd->add_option("-o,--output", tf.output, "Output directory");
  train_cmd->add_option("--dataset", tf.dataset,
                        "idx:PATH[:LABELS], pnm:DIR, gaussian2d:SIGMA, checkerboard2d, "
                        "textures:HxW, blobs:HxW");
  train_cmd->add_option("--dataset-size", tf.dataset_size, "Images drawn from a generator");
  train_cmd->add_option("--model", tf.model, "Config tag P-Ch-T-K-noise, e.g. 2-64-2-2-gauss0.05");
  train_cmd->add_option("--classes", tf.classes, "Number of classes (0 = unconditional)");
  train_cmd->add_option("--epochs", tf.epochs, "Total epochs");
  train_cmd->add_option("--batch-size", tf.batch_size);
  train_cmd->add_option("--seed", tf.seed);
  train_cmd->add_option("--precision", tf.precision, "f64 or f32");
  train_cmd->add_option("--flips", tf.flips, "auto, on or off");
  train_cmd->add_option("--resume", tf.resume, "Checkpoint to continue from")
      ->check(CLI::ExistingFile);
  train_cmd->add_flag("-q,--quiet", tf.quiet);

  SampleFlags sf;
  auto* sample_cmd = app.add_subcommand("sample", "Draw samples from a checkpoint");
  sample_cmd->add_option("-c,--config", sf.config, "JSON run config")->check(CLI::ExistingFile);
  sample_cmd->add_option("--checkpoint", sf.checkpoint)->check(CLI::ExistingFile);
  sample_cmd->add_option("-o,--output", sf.output, "Output directory");
  sample_cmd->add_option("--count", sf.count);
  sample_cmd->add_option("--class", sf.labels, "Class label (once, or once per sample)");
  sample_cmd->add_option("--guidance", sf.mode, "none, conditional or unconditional");
  sample_cmd->add_option("--guidance-w", sf.weight, "Guidance weight w >= 0");
  sample_cmd->add_option("--tau", sf.tau, "Reference attention temperature");
  sample_cmd->add_option("--schedule", sf.schedule, "uniform or linear");
  sample_cmd->add_option("--normalizer", sf.normalizer, "positions or blocks");
  sample_cmd->add_flag("--denoise", sf.denoise, "Apply the score-based denoising step");
  sample_cmd->add_option("--sigma", sf.sigma, "Denoising sigma (default: training noise)");
  sample_cmd->add_flag("--trajectory", sf.trajectory, "Write T+1 intermediate frames");
  sample_cmd->add_option("--seed", sf.seed);
  sample_cmd->add_flag("--no-clamp", sf.no_clamp, "Do not clamp alpha while sampling");

  EvalFlags ef;
  auto* eval_cmd = app.add_subcommand("eval-bpd", "Dequantized bits per dimension");
  eval_cmd->add_option("--checkpoint", ef.checkpoint)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--dataset", ef.dataset)->required();
  eval_cmd->add_option("--dataset-size", ef.count, "Images drawn from a generator");
  eval_cmd->add_option("--data-seed", ef.data_seed);
  eval_cmd->add_option("--draws", ef.draws, "Noise draws per example")
      ->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seed", ef.seed);
  eval_cmd->add_option("-o,--output", ef.output, "Also write the JSON report here");

  DenoiseFlags df;
  auto* denoise_cmd = app.add_subcommand("denoise", "Denoise a PGM/PPM image");
  denoise_cmd->add_option("--checkpoint", df.checkpoint)->required()->check(CLI::ExistingFile);
  denoise_cmd->add_option("-i,--input", df.input)->required()->check(CLI::ExistingFile);
  denoise_cmd->add_option("-o,--output", df.output)->required();
  denoise_cmd->add_option("--sigma", df.sigma);
  denoise_cmd->add_option("--class", df.label);

  std::string info_path;
  bool info_json = false;
  auto* info_cmd = app.add_subcommand("info", "Describe a checkpoint");
  info_cmd->add_option("checkpoint", info_path)->required()->check(CLI::ExistingFile);
  info_cmd->add_flag("--json", info_json);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return e.get_exit_code() == 0 ? 2 : e.get_exit_code();
  }

  if (deterministic) Eigen::setNbThreads(1);
  try {
    if (*train_cmd) return cmd_train(tf, out);
    if (*sample_cmd) return cmd_sample(sf, out);
    if (*eval_cmd) return cmd_eval(ef, out);
    if (*denoise_cmd) return cmd_denoise(df, out);
    if (*info_cmd) return cmd_info(info_path, info_json, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace tarflow
