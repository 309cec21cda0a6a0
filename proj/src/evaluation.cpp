#include "tarflow/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <json.hpp>

#include "tarflow/errors.hpp"
#include "tarflow/log.hpp"
#include "tarflow/sampling.hpp"

namespace tarflow {

std::string BpdReport::to_json() const {
  nlohmann::ordered_json j;
  j["mean_bpd"] = mean_bpd;
  j["stderr"] = stderr_bpd;
  j["n"] = count;
  j["draws"] = draws;
  j["precision"] = precision;
  return j.dump(2);
}

double bits_per_dim(double log_prob_nats, std::size_t dims, double bin) {
  return -log_prob_nats / (static_cast<double>(dims) * std::numbers::ln2) - std::log2(bin);
}

BpdReport bpd(const Dataset& dataset, const TarFlowModel& model, const BpdOptions& options) {
  const ModelConfig& config = model.config();
  if (dataset.size() == 0) throw ParameterError("bpd: empty dataset");
  if (options.draws == 0) throw ParameterError("bpd: draws must be >= 1");
  if (!(options.bin > 0.0)) throw ParameterError("bpd: bin width must be > 0");
  dataset.validate();
  if (dataset.channels != config.image_channels || dataset.height != config.image_height ||
      dataset.width != config.image_width) {
    throw ShapeError("bpd: dataset images are " + std::to_string(dataset.channels) + "x" +
                     std::to_string(dataset.height) + "x" + std::to_string(dataset.width) +
                     ", model expects " + std::to_string(config.image_channels) + "x" +
                     std::to_string(config.image_height) + "x" +
                     std::to_string(config.image_width));
  }
  if (config.noise.kind == NoiseKind::gaussian) {
    warn("bpd: model was trained with gaussian noise (" + config.noise.tag() +
         "); dequantized BPD is not comparable to uniform-noise training");
  }

  const TarFlowModel m64 = to_f64(model);
  const PatchGrid grid = config.grid();
  const std::size_t n = m64.seq_len();
  const std::size_t d = m64.token_dim();
  const std::size_t dims = n * d;
  const std::size_t count = dataset.size();
  const std::size_t chunk = std::max<std::size_t>(options.chunk, 1);
  std::uniform_real_distribution<double> uniform(0.0, options.bin);

  std::vector<double> per_example(count, 0.0);
  for (std::size_t begin = 0; begin < count; begin += chunk) {
    const std::size_t end = std::min(count, begin + chunk);
    std::vector<std::size_t> labels;
    if (config.num_classes > 0) {
      for (std::size_t i = begin; i < end; ++i) {
        labels.push_back(dataset.labeled() ? dataset.labels[i] : config.num_classes);
      }
    }
    std::vector<std::mt19937_64> rngs;
    for (std::size_t i = begin; i < end; ++i) rngs.push_back(lane_rng(options.seed, i));
    for (std::size_t draw = 0; draw < options.draws; ++draw) {
      Tensor xs({end - begin, n, d});
      auto out = xs.mutable_data();
      for (std::size_t i = begin; i < end; ++i) {
        const Tensor seq = patchify(dataset.images[i].to(Precision::f64), grid);
        auto& rng = rngs[i - begin];
        for (std::size_t k = 0; k < dims; ++k) {
          out[(i - begin) * dims + k] = seq[k] + uniform(rng);
        }
      }
      const auto lp = log_prob_batch(m64, xs, labels, chunk);
      for (std::size_t i = begin; i < end; ++i) per_example[i] += lp[i - begin];
    }
  }

  BpdReport report;
  report.count = count;
  report.draws = options.draws;
  double sum = 0.0;
  for (double& v : per_example) {
    v = bits_per_dim(v / static_cast<double>(options.draws), dims, options.bin);
    sum += v;
  }
  report.mean_bpd = sum / static_cast<double>(count);
  if (count > 1) {
    double sq = 0.0;
    for (double v : per_example) sq += (v - report.mean_bpd) * (v - report.mean_bpd);
    report.stderr_bpd = std::sqrt(sq / static_cast<double>(count - 1) / static_cast<double>(count));
  }
  if (!std::isfinite(report.mean_bpd)) {
    throw NumericalRangeError("bpd: non-finite result " + std::to_string(report.mean_bpd));
  }
  return report;
}

double quadrature_normalization(const TarFlowModel& model, double lo, double hi,
                                double step) {
  if (model.seq_len() * model.token_dim() != 2) {
    throw ParameterError("quadrature needs a model with N*D = 2, got " +
                         std::to_string(model.seq_len() * model.token_dim()));
  }
  if (!(hi > lo) || !(step > 0.0)) {
    throw ParameterError("quadrature: need lo < hi and step > 0");
  }
  const auto cells = static_cast<std::size_t>(std::llround((hi - lo) / step));
  if (cells == 0) throw ParameterError("quadrature: step wider than the domain");
  const double h = (hi - lo) / static_cast<double>(cells);
  const std::size_t points = cells + 1;
  const TarFlowModel m64 = to_f64(model);
  const std::size_t n = m64.seq_len();
  const std::size_t d = m64.token_dim();

  double mass = 0.0;
  double boundary = 0.0;
  for (std::size_t row = 0; row < points; ++row) {
    const double x0 = lo + h * static_cast<double>(row);
    Tensor xs({points, n, d});
    auto out = xs.mutable_data();
    for (std::size_t col = 0; col < points; ++col) {
      out[2 * col] = x0;
      out[2 * col + 1] = lo + h * static_cast<double>(col);
    }
    const auto lp = log_prob_batch(m64, xs, {}, 256);
    const double wr = (row == 0 || row == cells) ? 0.5 : 1.0;
    for (std::size_t col = 0; col < points; ++col) {
      const double p = std::exp(lp[col]);
      const bool edge_col = col == 0 || col == cells;
      if (edge_col || wr < 1.0) boundary = std::max(boundary, p);
      mass += wr * (edge_col ? 0.5 : 1.0) * p;
    }
  }
  if (boundary > 1e-6) {
    warn("quadrature: density reaches " + std::to_string(boundary) +
         " on the domain boundary; widen the domain");
  }
  return mass * h * h;
}

}  // namespace tarflow
