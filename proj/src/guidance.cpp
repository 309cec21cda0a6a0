#include "tarflow/guidance.hpp"

#include <cmath>

#include "tarflow/errors.hpp"

namespace tarflow {

void GuidanceSpec::validate() const {
  if (!(weight >= 0.0) || !std::isfinite(weight)) {
    throw ParameterError("guidance weight must be >= 0, got " +
                         std::to_string(weight));
  }
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("guidance temperature must be > 0, got " +
                         std::to_string(temperature));
  }
}

GuidanceMode parse_guidance_mode(const std::string& s) {
  if (s == "none") return GuidanceMode::none;
  if (s == "conditional") return GuidanceMode::conditional;
  if (s == "unconditional") return GuidanceMode::unconditional;
  throw ParameterError("guidance mode '" + s +
                       "' not one of none, conditional, unconditional");
}

GuidanceSchedule parse_guidance_schedule(const std::string& s) {
  if (s == "uniform") return GuidanceSchedule::uniform;
  if (s == "linear") return GuidanceSchedule::linear;
  throw ParameterError("guidance schedule '" + s + "' not one of uniform, linear");
}

ScheduleNormalizer parse_schedule_normalizer(const std::string& s) {
  if (s == "positions") return ScheduleNormalizer::positions;
  if (s == "blocks") return ScheduleNormalizer::blocks;
  throw ParameterError("schedule normalizer '" + s +
                       "' not one of positions, blocks");
}

std::string to_string(GuidanceMode mode) {
  switch (mode) {
    case GuidanceMode::none: return "none";
    case GuidanceMode::conditional: return "conditional";
    case GuidanceMode::unconditional: return "unconditional";
  }
  return "none";
}

std::string to_string(GuidanceSchedule schedule) {
  return schedule == GuidanceSchedule::linear ? "linear" : "uniform";
}

std::string to_string(ScheduleNormalizer normalizer) {
  return normalizer == ScheduleNormalizer::blocks ? "blocks" : "positions";
}

std::pair<Tensor, Tensor> guided_prediction(const Tensor& mu_c,
                                            const Tensor& alpha_c,
                                            const Tensor& mu_ref,
                                            const Tensor& alpha_ref,
                                            double weight) {
  if (mu_c.shape() != mu_ref.shape() || alpha_c.shape() != alpha_ref.shape() ||
      mu_c.shape() != alpha_c.shape()) {
    throw ShapeError("guided_prediction: shapes " + to_string(mu_c.shape()) +
                     " and " + to_string(mu_ref.shape()) + " differ");
  }
  auto extrapolate = [weight](const Tensor& c, const Tensor& ref) {
    return add(c, scale(sub(c, ref), weight));
  };
  return {extrapolate(mu_c, mu_ref), extrapolate(alpha_c, alpha_ref)};
}

double guidance_weight_at(std::size_t position, std::size_t seq_len,
                          std::size_t blocks, const GuidanceSpec& spec) {
  if (spec.schedule == GuidanceSchedule::uniform) return spec.weight;
  const std::size_t span =
      spec.normalizer == ScheduleNormalizer::positions ? seq_len - 1 : blocks - 1;
  if (span == 0) return spec.weight;
  return spec.weight * static_cast<double>(position) / static_cast<double>(span);
}

}  // namespace tarflow
