#include "tarflow/sampling.hpp"

#include <cmath>

#include "tarflow/errors.hpp"

namespace tarflow {

std::mt19937_64 lane_rng(std::uint64_t seed, std::uint64_t lane) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(lane), static_cast<std::uint32_t>(lane >> 32)};
  return std::mt19937_64(seq);
}

Tensor draw_prior(const TarFlowModel& model, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Tensor z({model.seq_len(), model.token_dim()});
  for (double& v : z.mutable_data()) v = normal(rng);
  if (model.config().vp_mode) {
    auto d = z.mutable_data();
    auto log_var = model.prior_log_variance().data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= std::exp(0.5 * log_var[i]);
  }
  return z.to(model.precision());
}

TarFlowModel to_f64(const TarFlowModel& model) {
  TarFlowModel copy = model;
  for (auto& block : copy.blocks()) block.set_precision(Precision::f64);
  copy.prior_log_variance() = copy.prior_log_variance().to(Precision::f64);
  return copy;
}

Tensor score(const TarFlowModel& model, const Tensor& seq,
             std::optional<std::size_t> label) {
  const TarFlowModel m64 = to_f64(model);
  Tape tape;
  const ModelVars vars = bind(tape, m64, false);
  const Var y = tape.leaf(reshape(seq.to(Precision::f64), {1, seq.dim(0), seq.dim(1)}));
  std::vector<std::size_t> labels;
  if (label) labels.push_back(*label);
  const Gradients grads = tape.backward(sum(log_prob(m64, vars, y, labels)));
  return reshape(grads[y], seq.shape());
}

Tensor denoise(const TarFlowModel& model, const Tensor& image, double sigma,
               std::optional<std::size_t> label) {
  if (!(sigma >= 0.0)) throw ParameterError("denoise sigma must be >= 0");
  const PatchGrid grid = model.config().grid();
  const Tensor seq = patchify(image.to(Precision::f64), grid);
  const Tensor g = score(model, seq, label);
  return unpatchify(add(seq, scale(g, sigma * sigma)), grid);
}

namespace {

std::optional<double> resolve_sigma(const TarFlowModel& model, const SampleOptions& options) {
  if (!options.denoise) return std::nullopt;
  if (options.denoise_sigma) return options.denoise_sigma;
  if (model.config().noise.kind != NoiseKind::gaussian) {
    throw ParameterError(
        "denoising needs a gaussian-noise model or an explicit sigma; this model "
        "was trained with " + model.config().noise.tag());
  }
  return model.config().noise.magnitude;
}

}  // namespace

std::vector<Tensor> capture_trajectory(const TarFlowModel& model, const Tensor& z,
                                       std::optional<std::size_t> label,
                                       const GuidanceSpec& guidance,
                                       const InverseOptions& options,
                                       std::optional<double> denoise_sigma) {
  const PatchGrid grid = model.config().grid();
  std::vector<Tensor> seqs;
  const Tensor x = model_inverse(model, z, label, guidance, options, &seqs);
  std::vector<Tensor> frames;
  for (const auto& s : seqs) frames.push_back(unpatchify(s, grid));
  if (denoise_sigma) frames.push_back(denoise(model, frames.back(), *denoise_sigma, label));
  return frames;
}

SampleResult sample(const TarFlowModel& model, const SampleOptions& options) {
  const ModelConfig& config = model.config();
  options.guidance.validate();
  if (!options.labels.empty() && config.num_classes == 0) {
    throw ParameterError("class labels given for an unconditional model");
  }
  if (options.labels.size() > 1 && options.labels.size() != options.count) {
    throw ParameterError(std::to_string(options.labels.size()) + " labels for " +
                         std::to_string(options.count) + " samples");
  }
  for (std::size_t label : options.labels) {
    if (label > config.num_classes) {
      throw ParameterError("label " + std::to_string(label) + " out of range for " +
                           std::to_string(config.num_classes) + " classes");
    }
  }
  if (options.guidance.mode == GuidanceMode::conditional) {
    if (config.num_classes == 0) {
      throw ParameterError("conditional guidance needs a class-conditional model");
    }
    if (options.labels.empty()) {
      throw ParameterError("conditional guidance needs class labels");
    }
  }
  const std::optional<double> sigma = resolve_sigma(model, options);
  const PatchGrid grid = config.grid();

  SampleResult result;
  for (std::size_t lane = 0; lane < options.count; ++lane) {
    std::optional<std::size_t> label;
    if (!options.labels.empty()) {
      label = options.labels.size() == 1 ? options.labels[0] : options.labels[lane];
      result.labels.push_back(*label);
    }
    std::mt19937_64 rng = lane_rng(options.seed, lane);
    const Tensor z = draw_prior(model, rng);
    if (options.trajectory) {
      auto frames = capture_trajectory(model, z, label, options.guidance, options.inverse, sigma);
      result.images.push_back(frames.back());
      result.trajectories.push_back(std::move(frames));
    } else {
      Tensor image = unpatchify(model_inverse(model, z, label, options.guidance, options.inverse),
                                grid);
      if (sigma) image = denoise(model, image, *sigma, label);
      result.images.push_back(std::move(image));
    }
  }
  return result;
}

}  // namespace tarflow
