#pragma once

// Versioned little-endian checkpoint files. Layout (all integers unsigned
// little-endian, all reals IEEE-754 binary64):
//
//   bytes 0..7   magic "TARFLOW\0"
//   u32          format version (1)
//   u32          precision (0 = f64, 1 = f32)
//   config       u64 patch, width, blocks, layers
//                u8 noise kind (0 = uniform, 1 = gaussian), f64 magnitude
//                u64 num_classes, f64 label_dropout, u8 vp_mode
//                u64 image channels, height, width
//   u64          training step
//   f64          best epoch loss (+inf before the first epoch)
//   u64 + bytes  rng state (text form of std::mt19937_64)
//   tensors      u64 count, then per tensor:
//                u32 name length, name bytes, u32 rank, u64 dims[rank],
//                f64 values[product(dims)]
//   u8           optimizer present; if 1: u64 optimizer step followed by a
//                tensor list of "m.<name>" and "v.<name>" moments
//
// Loading and saving again reproduces the file byte for byte.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tarflow/flow.hpp"
#include "tarflow/training.hpp"

namespace tarflow {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TarFlowModel model;
  std::optional<OptimizerState> optimizer;
  std::string rng_state;
  std::uint64_t step = 0;
  double best_loss = std::numeric_limits<double>::infinity();
};

Checkpoint make_checkpoint(const TrainState& state);
TrainState restore_train_state(const Checkpoint& checkpoint);

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tarflow
