#pragma once

// Generation: prior draws, guided sequential inversion, score-based
// denoising and trajectory capture.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "tarflow/flow.hpp"
#include "tarflow/guidance.hpp"

namespace tarflow {

// Random stream for sample `lane` under `seed`; lanes are independent of
// how many samples are drawn.
std::mt19937_64 lane_rng(std::uint64_t seed, std::uint64_t lane);

// z ~ N(0, I) as [N, D], scaled by exp(0.5 * log variance) in VP mode.
Tensor draw_prior(const TarFlowModel& model, std::mt19937_64& rng);

// The model with every tensor stored at 64-bit precision.
TarFlowModel to_f64(const TarFlowModel& model);

// grad_y log p(y) for a [N, D] sequence, always evaluated in 64-bit.
Tensor score(const TarFlowModel& model, const Tensor& seq,
             std::optional<std::size_t> label = {});

// y + sigma^2 * grad_y log p(y) on a [C, H, W] image.
Tensor denoise(const TarFlowModel& model, const Tensor& image, double sigma,
               std::optional<std::size_t> label = {});

struct SampleOptions {
  std::size_t count = 16;
  // Empty: unconditional. One entry: used for every sample. Otherwise one
  // per sample.
  std::vector<std::size_t> labels;
  GuidanceSpec guidance;
  bool denoise = false;
  // Defaults to the training noise magnitude of a gaussian-noise model.
  std::optional<double> denoise_sigma;
  bool trajectory = false;
  std::uint64_t seed = 0;
  InverseOptions inverse{true, 5.0};
};

struct SampleResult {
  std::vector<Tensor> images;                    // [C, H, W] each
  std::vector<std::size_t> labels;               // resolved per sample, if any
  // Per sample when requested: z^T, ..., z^0 as images, then the denoised
  // image when denoising is on.
  std::vector<std::vector<Tensor>> trajectories;
};

SampleResult sample(const TarFlowModel& model, const SampleOptions& options);

// Frames for one latent: unpatchified z^T, ..., z^0, plus the denoised
// image if `denoise_sigma` is set.
std::vector<Tensor> capture_trajectory(const TarFlowModel& model, const Tensor& z,
                                       std::optional<std::size_t> label = {},
                                       const GuidanceSpec& guidance = {},
                                       const InverseOptions& options = {true, 5.0},
                                       std::optional<double> denoise_sigma = {});

}  // namespace tarflow
