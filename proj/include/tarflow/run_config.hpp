#pragma once

// JSON run configuration shared by the command-line tools. Every section and
// key is optional; missing keys keep the defaults below. Unknown keys are
// rejected. See README.md for the schema.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tarflow/flow.hpp"
#include "tarflow/guidance.hpp"

namespace tarflow {

struct TrainSection {
  std::string dataset = "textures:8x8";
  std::size_t dataset_size = 4096;  // generators only
  std::size_t batch_size = 64;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  std::string flips = "auto";  // auto | on | off
  double lr = 1e-4;
  double lr_floor = 1e-6;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;
  std::string precision = "f64";  // f64 | f32
};

struct SampleSection {
  std::size_t count = 16;
  std::vector<std::size_t> labels;
  GuidanceSpec guidance;
  bool denoise = false;
  std::optional<double> denoise_sigma;
  bool trajectory = false;
  std::uint64_t seed = 0;
  // |alpha| limit while sampling; 0 disables clamping.
  double alpha_clamp = 5.0;
};

struct PathsSection {
  std::filesystem::path output_dir = "run";
  std::filesystem::path checkpoint;  // input checkpoint for sample/eval/denoise
  std::filesystem::path resume;      // checkpoint to continue training from
};

struct RunConfig {
  ModelConfig model;
  TrainSection train;
  SampleSection sample;
  PathsSection paths;

  // Throws ParameterError naming the offending field.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  // Fully resolved, defaults included.
  nlohmann::json to_json() const;
  void validate() const;
};

Precision parse_precision(const std::string& s);

}  // namespace tarflow
