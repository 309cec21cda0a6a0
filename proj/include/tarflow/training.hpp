#pragma once

// Noise-augmented maximum-likelihood training: input noise, label dropout,
// the flow loss, AdamW with warmup + cosine schedule, and the epoch loop.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tarflow/autodiff.hpp"
#include "tarflow/data.hpp"
#include "tarflow/flow.hpp"

namespace tarflow {

// x + U[0, bin) or x + N(0, sigma^2), elementwise.
Tensor add_noise(const Tensor& x, const NoiseSpec& spec, std::mt19937_64& rng);

// Replaces each label by `null_label` with probability p.
std::vector<std::size_t> drop_labels(std::span<const std::size_t> labels, double p,
                                     std::size_t null_label, std::mt19937_64& rng);

// Mean over the batch of 0.5 |z^T|^2 - logdet (the prior variance terms are
// included in VP mode), in nats per example. Equals -mean log p(x) minus
// (N*D/2) ln(2 pi). Throws NumericalRangeError on a non-finite value.
Var nvp_loss(const TarFlowModel& model, const ModelVars& vars, const Var& batch,
             std::span<const std::size_t> labels);
double nvp_loss(const TarFlowModel& model, const Tensor& batch,
                std::span<const std::size_t> labels = {});

struct LrSchedule {
  double peak = 1e-4;
  double floor = 1e-6;
};

// Linear warmup floor -> peak over warmup_steps, then cosine decay back to
// floor at total_steps. Out-of-range steps are clamped with a warning.
double lr_schedule(std::size_t step, std::size_t warmup_steps,
                   std::size_t total_steps, const LrSchedule& schedule = {});

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct OptimizerState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::uint64_t step = 0;

  static OptimizerState like(std::span<Tensor* const> params);
  bool operator==(const OptimizerState&) const = default;
};

// One AdamW update: param -= lr * wd * param, then the bias-corrected Adam
// step. Returns false (and changes nothing) when a gradient is not finite.
bool adamw_step(std::span<Tensor* const> params, std::span<const Tensor> grads,
                OptimizerState& state, double lr, const AdamWConfig& config = {});

// Scales grads in place so their joint L2 norm is at most max_norm; returns
// the norm before scaling.
double clip_global_norm(std::span<Tensor> grads, double max_norm);

// Learnable tensors of `model` and their tape handles, in the same order.
std::vector<Tensor*> model_parameters(TarFlowModel& model);
std::vector<Var> model_parameter_vars(const TarFlowModel& model,
                                      const ModelVars& vars);

struct TrainOptions {
  std::size_t batch_size = 64;
  std::size_t epochs = 1;
  LrSchedule lr;
  AdamWConfig adamw;
  double clip_norm = 1.0;
  // Horizontal flips with probability 0.5; by default only for gaussian
  // noise.
  enum class Flips { automatic, on, off } flips = Flips::automatic;
  // Output directory for loss.csv and checkpoints; empty writes nothing.
  std::filesystem::path output_dir;
  bool save_checkpoints = true;
  // Print one summary line per epoch to stdout.
  bool verbose = false;
};

struct StepRecord {
  std::uint64_t step = 0;  // 1-based count of optimizer steps taken
  double lr = 0.0;
  double loss = 0.0;       // nvp_loss, nats per example
  double seconds = 0.0;    // wall time since train() started
  bool skipped = false;
};

struct EpochSummary {
  std::size_t epoch = 0;            // 1-based
  double mean_loss = 0.0;           // nats per example
  double nats_per_dim = 0.0;        // -log p(x) per dimension
};

// Everything needed to continue training bit-identically.
struct TrainState {
  TarFlowModel model;
  OptimizerState optimizer;
  std::mt19937_64 rng;
  std::uint64_t step = 0;
  double best_loss = std::numeric_limits<double>::infinity();  // best epoch mean

  static TrainState fresh(const ModelConfig& config, std::uint64_t seed,
                          Precision precision = Precision::f64);
};

struct TrainResult {
  std::vector<StepRecord> steps;
  std::vector<EpochSummary> epochs;
};

// Steps per epoch for a dataset: ceil(size / batch).
std::size_t steps_per_epoch(std::size_t dataset_size, std::size_t batch_size);

// Runs epochs until options.epochs are complete, continuing from state.step
// (which must be on an epoch boundary). Appends to output_dir/loss.csv and
// writes epoch_NNNN.ckpt, last.ckpt and best.ckpt when output_dir is set.
TrainResult train(const Dataset& data, TrainState& state, const TrainOptions& options);

}  // namespace tarflow
