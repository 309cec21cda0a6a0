#include "tarflow/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "tarflow/checkpoint.hpp"
#include "tarflow/errors.hpp"
#include "tarflow/log.hpp"

namespace tarflow {
namespace {

double half_log_2pi_dims(const TarFlowModel& model) {
  return 0.5 * static_cast<double>(model.seq_len() * model.token_dim()) *
         std::log(2.0 * std::numbers::pi);
}

std::string format(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

}  // namespace

Tensor add_noise(const Tensor& x, const NoiseSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  Tensor y = x;
  auto d = y.mutable_data();
  if (spec.kind == NoiseKind::uniform) {
    std::uniform_real_distribution<double> u(0.0, spec.magnitude);
    for (double& v : d) v += u(rng);
  } else {
    std::normal_distribution<double> n(0.0, spec.magnitude);
    for (double& v : d) v += n(rng);
  }
  y.round_to_precision();
  return y;
}

std::vector<std::size_t> drop_labels(std::span<const std::size_t> labels, double p,
                                     std::size_t null_label, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw ParameterError("label dropout probability must be in [0, 1], got " + format(p));
  }
  std::bernoulli_distribution drop(p);
  std::vector<std::size_t> out(labels.begin(), labels.end());
  for (auto& label : out) {
    if (drop(rng)) label = null_label;
  }
  return out;
}

Var nvp_loss(const TarFlowModel& model, const ModelVars& vars, const Var& batch,
             std::span<const std::size_t> labels) {
  const FlowTrace trace = model_forward(model, vars, batch, labels);
  const Var per_example = prior_energy(model, vars, trace.z) - trace.logdet;
  const Var loss = mean(per_example);
  if (!std::isfinite(loss.value().item())) {
    throw NumericalRangeError("non-finite loss (max |alpha| = " +
                              format(trace.max_abs_alpha) + ", max |z| = " +
                              format(max_abs(trace.z.value())) + ")");
  }
  return loss;
}

double nvp_loss(const TarFlowModel& model, const Tensor& batch,
                std::span<const std::size_t> labels) {
  Tape tape;
  const ModelVars vars = bind(tape, model, false);
  return nvp_loss(model, vars, tape.constant(batch), labels).value().item();
}

double lr_schedule(std::size_t step, std::size_t warmup_steps,
                   std::size_t total_steps, const LrSchedule& schedule) {
  if (step > total_steps) {
    warn("lr_schedule: step " + std::to_string(step) + " past total " +
         std::to_string(total_steps) + ", clamped");
    step = total_steps;
  }
  const double span = schedule.peak - schedule.floor;
  if (step < warmup_steps) {
    return schedule.floor + span * static_cast<double>(step) /
                                static_cast<double>(warmup_steps);
  }
  if (total_steps <= warmup_steps) return schedule.peak;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return schedule.floor + span * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

OptimizerState OptimizerState::like(std::span<Tensor* const> params) {
  OptimizerState state;
  for (const Tensor* p : params) {
    state.first_moment.push_back(Tensor::zeros(p->shape()));
    state.second_moment.push_back(Tensor::zeros(p->shape()));
  }
  return state;
}

bool adamw_step(std::span<Tensor* const> params, std::span<const Tensor> grads,
                OptimizerState& state, double lr, const AdamWConfig& config) {
  if (params.size() != grads.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size()) {
    throw ShapeError("adamw_step: " + std::to_string(params.size()) + " parameters, " +
                     std::to_string(grads.size()) + " gradients, " +
                     std::to_string(state.first_moment.size()) + " moment slots");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].shape() != params[k]->shape() ||
        state.first_moment[k].shape() != params[k]->shape()) {
      throw ShapeError("adamw_step: gradient " + to_string(grads[k].shape()) +
                       " for parameter " + to_string(params[k]->shape()));
    }
    if (!all_finite(grads[k])) return false;
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  const double decay = lr * config.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k]->mutable_data();
    auto g = grads[k].data();
    auto m = state.first_moment[k].mutable_data();
    auto v = state.second_moment[k].mutable_data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] -= decay * p[i];
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps);
    }
    params[k]->round_to_precision();
  }
  return true;
}

double clip_global_norm(std::span<Tensor> grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads) {
    for (double v : g.data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm) {
    const double factor = max_norm / norm;
    for (Tensor& g : grads) {
      for (double& v : g.mutable_data()) v *= factor;
    }
  }
  return norm;
}

std::vector<Tensor*> model_parameters(TarFlowModel& model) {
  std::vector<Tensor*> out;
  model.for_each_parameter([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<Var> model_parameter_vars(const TarFlowModel& model,
                                      const ModelVars& vars) {
  std::vector<Var> out;
  for (std::size_t t = 0; t < model.num_blocks(); ++t) {
    for_each_weight(model.blocks()[t].shape,
                    [&](const std::string&, const Var& v) { out.push_back(v); },
                    vars.blocks[t]);
  }
  if (model.config().vp_mode) out.push_back(vars.prior_log_variance);
  return out;
}

TrainState TrainState::fresh(const ModelConfig& config, std::uint64_t seed,
                             Precision precision) {
  TrainState state;
  state.model = TarFlowModel::init(config, seed, precision);
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32), 0x74726e67u};
  state.rng.seed(seq);
  auto params = model_parameters(state.model);
  state.optimizer = OptimizerState::like(params);
  return state;
}

std::size_t steps_per_epoch(std::size_t dataset_size, std::size_t batch_size) {
  if (batch_size == 0) throw ParameterError("batch size must be > 0");
  return (dataset_size + batch_size - 1) / batch_size;
}

TrainResult train(const Dataset& data, TrainState& state, const TrainOptions& options) {
  data.validate();
  TarFlowModel& model = state.model;
  const ModelConfig& config = model.config();
  const PatchGrid grid = config.grid();
  if (data.channels != grid.channels || data.height != grid.height ||
      data.width != grid.width) {
    throw ShapeError("dataset images are " +
                     to_string(Shape{data.channels, data.height, data.width}) +
                     " but the model expects " +
                     to_string(Shape{grid.channels, grid.height, grid.width}));
  }
  if (data.size() == 0) throw ParameterError("cannot train on an empty dataset");
  const bool conditional = config.num_classes > 0;
  if (conditional && !data.labeled()) {
    throw ParameterError("class-conditional model needs a labeled dataset");
  }
  if (conditional && data.num_classes > config.num_classes) {
    throw ParameterError("dataset has " + std::to_string(data.num_classes) +
                         " classes but the model only " +
                         std::to_string(config.num_classes));
  }
  if (!(options.clip_norm > 0.0)) throw ParameterError("clip norm must be > 0");

  const std::size_t spe = steps_per_epoch(data.size(), options.batch_size);
  const std::size_t total = spe * options.epochs;
  if (state.step % spe != 0) {
    throw ParameterError("training state at step " + std::to_string(state.step) +
                         " is not on an epoch boundary (" + std::to_string(spe) +
                         " steps per epoch)");
  }
  const bool flips = options.flips == TrainOptions::Flips::on ||
                     (options.flips == TrainOptions::Flips::automatic &&
                      config.noise.kind == NoiseKind::gaussian);

  auto params = model_parameters(model);
  if (state.optimizer.first_moment.size() != params.size()) {
    state.optimizer = OptimizerState::like(params);
  }

  std::ofstream csv;
  if (!options.output_dir.empty()) {
    std::filesystem::create_directories(options.output_dir);
    const auto path = options.output_dir / "loss.csv";
    const bool fresh_file = !std::filesystem::exists(path) || state.step == 0;
    csv.open(path, fresh_file ? std::ios::trunc : std::ios::app);
    if (!csv) throw std::runtime_error("cannot write " + path.string());
    if (fresh_file) csv << "step,lr,loss_nats,seconds\n";
    csv << std::setprecision(17);
  }

  const std::size_t n = grid.seq_len(), d = grid.token_dim();
  const auto start = std::chrono::steady_clock::now();
  std::bernoulli_distribution coin(0.5);
  TrainResult result;

  for (std::size_t epoch = state.step / spe; epoch < options.epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), state.rng);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;

    for (std::size_t b = 0; b < spe; ++b) {
      const std::size_t begin = b * options.batch_size;
      const std::size_t end = std::min(data.size(), begin + options.batch_size);
      Tensor batch({end - begin, n, d}, model.precision());
      std::vector<std::size_t> labels;
      auto out = batch.mutable_data();
      for (std::size_t k = begin; k < end; ++k) {
        const Tensor& image = data.images[order[k]];
        const Tensor seq = patchify(flips && coin(state.rng) ? flip_horizontal(image) : image,
                                    grid);
        std::copy(seq.data().begin(), seq.data().end(), out.begin() + (k - begin) * n * d);
        if (conditional) labels.push_back(data.labels[order[k]]);
      }
      batch = add_noise(batch, config.noise, state.rng);
      if (conditional) {
        labels = drop_labels(labels, config.label_dropout, config.num_classes, state.rng);
      }

      const double lr = lr_schedule(state.step, spe, total, options.lr);
      Tape tape;
      const ModelVars vars = bind(tape, model, true);
      const Var loss = nvp_loss(model, vars, tape.constant(batch), labels);
      const Gradients grads = tape.backward(loss);
      std::vector<Tensor> g;
      for (const Var& v : model_parameter_vars(model, vars)) g.push_back(grads[v]);
      clip_global_norm(g, options.clip_norm);
      const bool applied = adamw_step(params, g, state.optimizer, lr, options.adamw);
      if (!applied) {
        warn("step " + std::to_string(state.step + 1) +
             ": non-finite gradient, update skipped");
      }
      ++state.step;

      StepRecord rec;
      rec.step = state.step;
      rec.lr = lr;
      rec.loss = loss.value().item();
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      rec.skipped = !applied;
      result.steps.push_back(rec);
      loss_sum += rec.loss;
      ++loss_count;
      if (csv.is_open()) {
        csv << rec.step << ',' << rec.lr << ',' << rec.loss << ',' << rec.seconds << '\n';
      }
    }

    EpochSummary summary;
    summary.epoch = epoch + 1;
    summary.mean_loss = loss_sum / static_cast<double>(loss_count);
    summary.nats_per_dim = (summary.mean_loss + half_log_2pi_dims(model)) /
                           static_cast<double>(n * d);
    result.epochs.push_back(summary);
    const bool best = summary.mean_loss < state.best_loss;
    if (best) state.best_loss = summary.mean_loss;
    if (options.verbose) {
      std::cout << "epoch " << summary.epoch << "/" << options.epochs << "  step "
                << state.step << "  loss " << format(summary.mean_loss)
                << " nats  " << format(summary.nats_per_dim) << " nats/dim\n"
                << std::flush;
    }
    if (csv.is_open()) csv.flush();
    if (!options.output_dir.empty() && options.save_checkpoints) {
      const Checkpoint ckpt = make_checkpoint(state);
      std::ostringstream name;
      name << "epoch_" << std::setw(4) << std::setfill('0') << summary.epoch << ".ckpt";
      save_checkpoint(ckpt, options.output_dir / name.str());
      save_checkpoint(ckpt, options.output_dir / "last.ckpt");
      if (best) save_checkpoint(ckpt, options.output_dir / "best.ckpt");
    }
  }
  return result;
}

}  // namespace tarflow
