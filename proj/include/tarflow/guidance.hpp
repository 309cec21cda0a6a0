#pragma once

#include <cstddef>
#include <string>
#include <utility>

#include "tarflow/tensor.hpp"

namespace tarflow {

enum class GuidanceMode { none, conditional, unconditional };
enum class GuidanceSchedule { uniform, linear };
// Denominator of the linear schedule: sequence positions (N - 1) or flow
// blocks (T - 1).
enum class ScheduleNormalizer { positions, blocks };

struct GuidanceSpec {
  GuidanceMode mode = GuidanceMode::none;
  double weight = 0.0;
  // Attention temperature of the reference stream in unconditional mode.
  double temperature = 1.0;
  GuidanceSchedule schedule = GuidanceSchedule::uniform;
  ScheduleNormalizer normalizer = ScheduleNormalizer::positions;

  bool active() const { return mode != GuidanceMode::none; }
  void validate() const;
};

GuidanceMode parse_guidance_mode(const std::string& s);
GuidanceSchedule parse_guidance_schedule(const std::string& s);
ScheduleNormalizer parse_schedule_normalizer(const std::string& s);
std::string to_string(GuidanceMode mode);
std::string to_string(GuidanceSchedule schedule);
std::string to_string(ScheduleNormalizer normalizer);

// Extrapolates away from the reference prediction:
//   mu~ = (1 + w) mu_c - w mu_ref, alpha~ likewise.
// Evaluated as mu_c + w (mu_c - mu_ref) so that w = 0 or equal predictions
// return mu_c bit for bit.
std::pair<Tensor, Tensor> guided_prediction(const Tensor& mu_c,
                                            const Tensor& alpha_c,
                                            const Tensor& mu_ref,
                                            const Tensor& alpha_ref,
                                            double weight);

// Guidance weight for sequence position i (1 <= i <= N - 1) of a block.
double guidance_weight_at(std::size_t position, std::size_t seq_len,
                          std::size_t blocks, const GuidanceSpec& spec);

}  // namespace tarflow
