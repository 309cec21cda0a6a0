#pragma once

// Transformer autoregressive flow: patchification, per-block permutations,
// the affine autoregressive transform with its exact log-determinant, the
// sequential inverse, and the model log-density.
//
// Block t maps z^t to z^{t+1}:
//   z~ = pi_t(z^t)
//   z^{t+1}_0 = z~_0
//   z^{t+1}_i = (z~_i - mu_i(z~_<i)) * exp(-alpha_i(z~_<i))   for i > 0
// with log|det| = -sum_{i>0,j} alpha_i[j]. pi_0 is the identity and every
// later pi_t reverses the sequence.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tarflow/autodiff.hpp"
#include "tarflow/guidance.hpp"
#include "tarflow/tensor.hpp"
#include "tarflow/transformer.hpp"

namespace tarflow {

enum class NoiseKind { uniform, gaussian };

/// Training-time input noise: U[0, magnitude) dequantization or
/// N(0, magnitude^2) augmentation.
struct NoiseSpec {
  NoiseKind kind = NoiseKind::gaussian;
  double magnitude = 0.05;

  void validate() const;
  // "gauss0.05" or "unif0.0078125"; parse also accepts "unif1/128".
  std::string tag() const;
  static NoiseSpec parse(const std::string& tag);
  bool operator==(const NoiseSpec&) const = default;
};

struct PatchGrid {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t patch = 1;

  std::size_t seq_len() const { return (height / patch) * (width / patch); }
  std::size_t token_dim() const { return channels * patch * patch; }
  void validate() const;
};

/// Architecture descriptor "P-Ch-T-K-noise" plus image geometry,
/// conditioning and the volume-preserving switch.
struct ModelConfig {
  std::size_t patch = 2;
  std::size_t width = 64;
  std::size_t blocks = 2;
  std::size_t layers = 2;
  NoiseSpec noise;
  std::size_t num_classes = 0;
  double label_dropout = 0.1;
  bool vp_mode = false;
  std::size_t image_channels = 1;
  std::size_t image_height = 8;
  std::size_t image_width = 8;

  PatchGrid grid() const;
  BlockShape block_shape() const;
  std::size_t total_dim() const;
  void validate() const;
  std::string tag() const;
  // Fills patch, width, blocks, layers and noise from a tag, keeping the
  // remaining fields.
  void apply_tag(const std::string& tag);
  bool operator==(const ModelConfig&) const = default;
};

class TarFlowModel {
 public:
  TarFlowModel() = default;
  static TarFlowModel init(const ModelConfig& config, std::uint64_t seed,
                           Precision precision = Precision::f64);

  const ModelConfig& config() const { return config_; }
  std::size_t seq_len() const { return config_.grid().seq_len(); }
  std::size_t token_dim() const { return config_.grid().token_dim(); }
  std::size_t num_blocks() const { return blocks_.size(); }
  Precision precision() const {
    return blocks_.empty() ? Precision::f64 : blocks_[0].weights.in_w.precision();
  }

  const std::vector<FlowBlockParams>& blocks() const { return blocks_; }
  std::vector<FlowBlockParams>& blocks() { return blocks_; }

  // Per-element log variance of the Gaussian prior; only used in VP mode.
  const Tensor& prior_log_variance() const { return prior_log_variance_; }
  Tensor& prior_log_variance() { return prior_log_variance_; }

  // Calls f(name, tensor) for every learnable tensor in a fixed order.
  template <class F>
  void for_each_parameter(F&& f);
  template <class F>
  void for_each_parameter(F&& f) const;

  std::size_t parameter_count() const;

 private:
  ModelConfig config_;
  std::vector<FlowBlockParams> blocks_;
  Tensor prior_log_variance_;
};

template <class F>
void TarFlowModel::for_each_parameter(F&& f) {
  for (std::size_t t = 0; t < blocks_.size(); ++t) {
    const std::string prefix = "block" + std::to_string(t) + ".";
    for_each_weight(blocks_[t].shape,
                    [&](const std::string& name, Tensor& w) { f(prefix + name, w); },
                    blocks_[t].weights);
  }
  if (config_.vp_mode) f(std::string("prior_log_variance"), prior_log_variance_);
}

template <class F>
void TarFlowModel::for_each_parameter(F&& f) const {
  for (std::size_t t = 0; t < blocks_.size(); ++t) {
    const std::string prefix = "block" + std::to_string(t) + ".";
    for_each_weight(blocks_[t].shape,
                    [&](const std::string& name, const Tensor& w) { f(prefix + name, w); },
                    blocks_[t].weights);
  }
  if (config_.vp_mode) f(std::string("prior_log_variance"), prior_log_variance_);
}

// ---- patch sequences -------------------------------------------------------

// [C, H, W] image -> [N, D]. Patches in raster order; inside a patch,
// channel-major then row-major pixels.
Tensor patchify(const Tensor& image, const PatchGrid& grid);
Tensor unpatchify(const Tensor& seq, const PatchGrid& grid);

// Identity for t = 0, row reversal along the sequence axis otherwise.
// Accepts [N, D] or [B, N, D].
Tensor permute(const Tensor& seq, std::size_t t);

// ---- the affine autoregressive step with arbitrary causal predictors ------

struct Prediction {
  Tensor mu;
  Tensor alpha;
};

// Maps a full [N, D] sequence to causal predictions; row i may only depend
// on rows < i of its argument.
using CausalPredictor = std::function<Prediction(const Tensor& z_tilde)>;

// Forward transform of an already-permuted sequence; returns (z_next, logdet).
std::pair<Tensor, double> affine_forward(const Tensor& z_tilde, const Tensor& mu,
                                         const Tensor& alpha);
std::pair<Tensor, double> autoregressive_forward(const Tensor& z_tilde,
                                                 const CausalPredictor& predictor);
// Row-by-row inverse, re-running the predictor on the partial reconstruction.
Tensor autoregressive_inverse(const Tensor& z_next,
                              const CausalPredictor& predictor);

// ---- differentiable model evaluation --------------------------------------

struct ModelVars {
  std::vector<BlockWeights<Var>> blocks;
  Var prior_log_variance;
};

ModelVars bind(Tape& tape, const TarFlowModel& model, bool requires_grad);

Var permute(const Var& seq, std::size_t t);

struct BlockTransform {
  Var z_next;  // [B, N, D]
  Var logdet;  // [B], accumulated in 64-bit
  double max_abs_alpha = 0.0;
};

// `labels` is empty or holds one class index per example (num_classes is
// the null label).
BlockTransform flow_block_forward(const TarFlowModel& model,
                                  const ModelVars& vars, std::size_t t,
                                  const Var& z, std::span<const std::size_t> labels);

struct FlowTrace {
  Var z;       // z^T, [B, N, D]
  Var logdet;  // [B]
  double max_abs_alpha = 0.0;
};

FlowTrace model_forward(const TarFlowModel& model, const ModelVars& vars,
                        const Var& x, std::span<const std::size_t> labels);

// Negative prior log-density without the (N*D/2) ln(2 pi) constant, per
// example: 0.5 |z|^2, or 0.5 sum(z^2 / var + ln var) in VP mode.
Var prior_energy(const TarFlowModel& model, const ModelVars& vars, const Var& z);

// Prior term log N(z; 0, I) (or the learned-variance prior in VP mode),
// per example, given z^T.
Var prior_log_prob(const TarFlowModel& model, const ModelVars& vars,
                   const Var& z);

// log p(x) in nats, one entry per example.
Var log_prob(const TarFlowModel& model, const ModelVars& vars, const Var& x,
             std::span<const std::size_t> labels);

// ---- value-level convenience API on single [N, D] sequences ---------------

std::pair<Tensor, double> flow_block_forward(const TarFlowModel& model,
                                             std::size_t t, const Tensor& z,
                                             std::optional<std::size_t> label = {});

struct InverseOptions {
  // Clamp alpha to [-alpha_limit, alpha_limit] before exponentiating. Only
  // meant for sampling from undertrained models.
  bool clamp_alpha = false;
  double alpha_limit = 5.0;
};

Tensor flow_block_inverse(const TarFlowModel& model, std::size_t t,
                          const Tensor& z_next,
                          std::optional<std::size_t> label = {},
                          const GuidanceSpec& guidance = {},
                          const InverseOptions& options = {});

std::pair<Tensor, double> model_forward(const TarFlowModel& model,
                                        const Tensor& x,
                                        std::optional<std::size_t> label = {});

// Applies block inverses for t = T-1 .. 0. When `trajectory` is given it
// receives z^T, z^{T-1}, ..., z^0 (T + 1 sequences).
Tensor model_inverse(const TarFlowModel& model, const Tensor& z,
                     std::optional<std::size_t> label = {},
                     const GuidanceSpec& guidance = {},
                     const InverseOptions& options = {},
                     std::vector<Tensor>* trajectory = nullptr);

double log_prob(const TarFlowModel& model, const Tensor& x,
                std::optional<std::size_t> label = {});

// Batched log-density of xs [B, N, D], evaluated in chunks.
std::vector<double> log_prob_batch(const TarFlowModel& model, const Tensor& xs,
                                   std::span<const std::size_t> labels = {},
                                   std::size_t chunk = 512);

}  // namespace tarflow
