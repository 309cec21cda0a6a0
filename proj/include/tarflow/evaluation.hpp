#pragma once

// Likelihood evaluation in bits per dimension and a quadrature check of
// density normalization for two-dimensional models.

#include <cstddef>
#include <cstdint>
#include <string>

#include "tarflow/data.hpp"
#include "tarflow/flow.hpp"

namespace tarflow {

struct BpdOptions {
  // Dequantization draws u ~ U[0, bin)^(N*D) averaged per example.
  std::size_t draws = 1;
  std::uint64_t seed = 0;
  // Width of one 8-bit quantization bin on the [-1, 1] scale.
  double bin = 1.0 / 128.0;
  std::size_t chunk = 256;
};

struct BpdReport {
  double mean_bpd = 0.0;
  double stderr_bpd = 0.0;
  std::size_t count = 0;
  std::size_t draws = 0;
  std::string precision = "f64";

  // {"mean_bpd", "stderr", "n", "draws", "precision"}
  std::string to_json() const;
};

// -log p / (dims ln 2) - log2(bin).
double bits_per_dim(double log_prob_nats, std::size_t dims, double bin);

// Always evaluates at 64-bit precision. Conditional models use the dataset
// labels when present and the null label otherwise.
BpdReport bpd(const Dataset& dataset, const TarFlowModel& model,
              const BpdOptions& options = {});

// Trapezoid integral of exp(log p) over [lo, hi]^2 for a model with
// N * D = 2. Warns when the density on the boundary exceeds 1e-6.
double quadrature_normalization(const TarFlowModel& model, double lo = -6.0,
                                double hi = 6.0, double step = 0.01);

}  // namespace tarflow
