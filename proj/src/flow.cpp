#include "tarflow/flow.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "tarflow/errors.hpp"

namespace tarflow {
namespace {

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_number(const std::string& s, const std::string& what) {
  const auto slash = s.find('/');
  if (slash != std::string::npos) {
    return parse_number(s.substr(0, slash), what) /
           parse_number(s.substr(slash + 1), what);
  }
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ParameterError(what + ": '" + s + "' is not a number");
  }
  return v;
}

std::size_t parse_count(const std::string& s, const std::string& field) {
  std::size_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ParameterError("config tag field " + field + ": '" + s +
                         "' is not a non-negative integer");
  }
  return v;
}

// [N, 1] mask with a zero in row 0, broadcast over batch and token dims.
Tensor first_row_mask(std::size_t n) {
  Tensor mask({n, 1});
  auto m = mask.mutable_data();
  for (std::size_t i = 1; i < n; ++i) m[i] = 1.0;
  return mask;
}

void check_sequence(const TarFlowModel& model, const Tensor& seq,
                    const char* op) {
  if (seq.rank() != 2 || seq.dim(0) != model.seq_len() ||
      seq.dim(1) != model.token_dim()) {
    throw ShapeError(std::string(op) + ": sequence " + to_string(seq.shape()) +
                     " does not match [" + std::to_string(model.seq_len()) +
                     ", " + std::to_string(model.token_dim()) + "]");
  }
}

Tensor as_batch(const Tensor& seq) {
  return reshape(seq, {1, seq.dim(0), seq.dim(1)});
}

std::vector<std::size_t> label_vector(std::optional<std::size_t> label) {
  if (!label) return {};
  return {*label};
}

[[noreturn]] void throw_range(std::size_t t, double alpha_magnitude) {
  throw NumericalRangeError("flow block " + std::to_string(t) +
                            " produced non-finite values (max |alpha| = " +
                            format_number(alpha_magnitude) + ")");
}

}  // namespace

void NoiseSpec::validate() const {
  if (!(magnitude > 0.0) || !std::isfinite(magnitude)) {
    throw ParameterError("noise magnitude must be > 0, got " +
                         format_number(magnitude));
  }
}

std::string NoiseSpec::tag() const {
  return (kind == NoiseKind::gaussian ? "gauss" : "unif") + format_number(magnitude);
}

NoiseSpec NoiseSpec::parse(const std::string& tag) {
  NoiseSpec spec;
  std::string value;
  if (tag.rfind("gauss", 0) == 0) {
    spec.kind = NoiseKind::gaussian;
    value = tag.substr(5);
  } else if (tag.rfind("unif", 0) == 0) {
    spec.kind = NoiseKind::uniform;
    value = tag.substr(4);
  } else {
    throw ParameterError("noise '" + tag +
                         "' must start with 'gauss' or 'unif' (e.g. gauss0.05, unif1/128)");
  }
  spec.magnitude = parse_number(value, "noise magnitude");
  spec.validate();
  return spec;
}

void PatchGrid::validate() const {
  if (channels == 0 || height == 0 || width == 0 || patch == 0) {
    throw ParameterError("image dimensions and patch size must be positive");
  }
  if (height % patch != 0 || width % patch != 0) {
    throw ParameterError("patch size " + std::to_string(patch) +
                         " does not divide image " + std::to_string(height) +
                         "x" + std::to_string(width));
  }
}

PatchGrid ModelConfig::grid() const {
  return PatchGrid{image_channels, image_height, image_width, patch};
}

BlockShape ModelConfig::block_shape() const {
  const PatchGrid g = grid();
  return BlockShape{g.seq_len(), g.token_dim(), width, layers, num_classes};
}

std::size_t ModelConfig::total_dim() const {
  return image_channels * image_height * image_width;
}

void ModelConfig::validate() const {
  grid().validate();
  if (blocks < 1) throw ParameterError("blocks (T) must be >= 1");
  if (layers < 1) throw ParameterError("layers (K) must be >= 1");
  if (width == 0 || width % kHeadDim != 0) {
    throw ParameterError("width (Ch) = " + std::to_string(width) +
                         " must be a positive multiple of " +
                         std::to_string(kHeadDim));
  }
  noise.validate();
  if (!(label_dropout >= 0.0 && label_dropout <= 1.0)) {
    throw ParameterError("label_dropout must lie in [0, 1]");
  }
}

std::string ModelConfig::tag() const {
  return std::to_string(patch) + "-" + std::to_string(width) + "-" +
         std::to_string(blocks) + "-" + std::to_string(layers) + "-" +
         noise.tag();
}

void ModelConfig::apply_tag(const std::string& tag) {
  std::vector<std::string> fields;
  std::size_t pos = 0;
  for (int i = 0; i < 4; ++i) {
    const auto dash = tag.find('-', pos);
    if (dash == std::string::npos) {
      throw ParameterError("config tag '" + tag +
                           "' is not of the form P-Ch-T-K-noise");
    }
    fields.push_back(tag.substr(pos, dash - pos));
    pos = dash + 1;
  }
  patch = parse_count(fields[0], "P");
  width = parse_count(fields[1], "Ch");
  blocks = parse_count(fields[2], "T");
  layers = parse_count(fields[3], "K");
  noise = NoiseSpec::parse(tag.substr(pos));
}

TarFlowModel TarFlowModel::init(const ModelConfig& config, std::uint64_t seed,
                                Precision precision) {
  config.validate();
  TarFlowModel model;
  model.config_ = config;
  std::mt19937_64 rng(seed);
  const BlockShape shape = config.block_shape();
  for (std::size_t t = 0; t < config.blocks; ++t) {
    model.blocks_.push_back(FlowBlockParams::init(shape, rng, precision));
  }
  if (config.vp_mode) {
    model.prior_log_variance_ =
        Tensor::zeros({shape.seq_len, shape.token_dim}, precision);
  }
  return model;
}

std::size_t TarFlowModel::parameter_count() const {
  std::size_t n = 0;
  for_each_parameter([&n](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

Tensor patchify(const Tensor& image, const PatchGrid& grid) {
  grid.validate();
  if (image.shape() != Shape{grid.channels, grid.height, grid.width}) {
    throw ShapeError("patchify: image " + to_string(image.shape()) +
                     " does not match grid [" + std::to_string(grid.channels) +
                     ", " + std::to_string(grid.height) + ", " +
                     std::to_string(grid.width) + "]");
  }
  const std::size_t s = grid.patch;
  const std::size_t cols = grid.width / s;
  Tensor seq({grid.seq_len(), grid.token_dim()}, image.precision());
  auto out = seq.mutable_data();
  auto in = image.data();
  for (std::size_t n = 0; n < grid.seq_len(); ++n) {
    const std::size_t py = n / cols;
    const std::size_t px = n % cols;
    for (std::size_t c = 0; c < grid.channels; ++c) {
      for (std::size_t dy = 0; dy < s; ++dy) {
        for (std::size_t dx = 0; dx < s; ++dx) {
          const std::size_t d = (c * s + dy) * s + dx;
          const std::size_t y = py * s + dy;
          const std::size_t x = px * s + dx;
          out[n * grid.token_dim() + d] = in[(c * grid.height + y) * grid.width + x];
        }
      }
    }
  }
  return seq;
}

Tensor unpatchify(const Tensor& seq, const PatchGrid& grid) {
  grid.validate();
  if (seq.shape() != Shape{grid.seq_len(), grid.token_dim()}) {
    throw ShapeError("unpatchify: sequence " + to_string(seq.shape()) +
                     " does not match [" + std::to_string(grid.seq_len()) +
                     ", " + std::to_string(grid.token_dim()) + "]");
  }
  const std::size_t s = grid.patch;
  const std::size_t cols = grid.width / s;
  Tensor image({grid.channels, grid.height, grid.width}, seq.precision());
  auto out = image.mutable_data();
  auto in = seq.data();
  for (std::size_t n = 0; n < grid.seq_len(); ++n) {
    const std::size_t py = n / cols;
    const std::size_t px = n % cols;
    for (std::size_t c = 0; c < grid.channels; ++c) {
      for (std::size_t dy = 0; dy < s; ++dy) {
        for (std::size_t dx = 0; dx < s; ++dx) {
          const std::size_t d = (c * s + dy) * s + dx;
          const std::size_t y = py * s + dy;
          const std::size_t x = px * s + dx;
          out[(c * grid.height + y) * grid.width + x] = in[n * grid.token_dim() + d];
        }
      }
    }
  }
  return image;
}

Tensor permute(const Tensor& seq, std::size_t t) {
  if (seq.rank() != 2 && seq.rank() != 3) {
    throw ShapeError("permute: expected [N, D] or [B, N, D], got " +
                     to_string(seq.shape()));
  }
  if (t == 0) return seq;
  const std::size_t batch = seq.rank() == 3 ? seq.dim(0) : 1;
  const std::size_t n = seq.dim(seq.rank() - 2);
  const std::size_t d = seq.dim(seq.rank() - 1);
  Tensor out(seq.shape(), seq.precision());
  auto o = out.mutable_data();
  auto in = seq.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(in.begin() + (b * n + n - 1 - i) * d, d,
                  o.begin() + (b * n + i) * d);
    }
  }
  return out;
}

std::pair<Tensor, double> affine_forward(const Tensor& z_tilde, const Tensor& mu,
                                         const Tensor& alpha) {
  if (z_tilde.rank() != 2 || mu.shape() != z_tilde.shape() ||
      alpha.shape() != z_tilde.shape()) {
    throw ShapeError("affine_forward: z " + to_string(z_tilde.shape()) +
                     ", mu " + to_string(mu.shape()) + ", alpha " +
                     to_string(alpha.shape()));
  }
  const std::size_t n = z_tilde.dim(0);
  const std::size_t d = z_tilde.dim(1);
  Tensor out = z_tilde;
  auto o = out.mutable_data();
  double logdet = 0.0;
  double alpha_max = 0.0;
  for (std::size_t i = 1; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t k = i * d + j;
      o[k] = (z_tilde[k] - mu[k]) * std::exp(-alpha[k]);
      logdet -= alpha[k];
      alpha_max = std::max(alpha_max, std::abs(alpha[k]));
    }
  }
  out.round_to_precision();
  if (!all_finite(out)) throw_range(0, alpha_max);
  return {out, logdet};
}

std::pair<Tensor, double> autoregressive_forward(const Tensor& z_tilde,
                                                 const CausalPredictor& predictor) {
  const Prediction p = predictor(z_tilde);
  return affine_forward(z_tilde, p.mu, p.alpha);
}

Tensor autoregressive_inverse(const Tensor& z_next,
                              const CausalPredictor& predictor) {
  if (z_next.rank() != 2) {
    throw ShapeError("autoregressive_inverse: expected [N, D], got " +
                     to_string(z_next.shape()));
  }
  const std::size_t n = z_next.dim(0);
  const std::size_t d = z_next.dim(1);
  Tensor z_tilde(z_next.shape(), z_next.precision());
  auto zt = z_tilde.mutable_data();
  std::copy_n(z_next.data().begin(), d, zt.begin());
  for (std::size_t i = 1; i < n; ++i) {
    const Prediction p = predictor(z_tilde);
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t k = i * d + j;
      zt[k] = z_next[k] * std::exp(p.alpha[k]) + p.mu[k];
    }
  }
  z_tilde.round_to_precision();
  return z_tilde;
}

ModelVars bind(Tape& tape, const TarFlowModel& model, bool requires_grad) {
  ModelVars vars;
  for (const auto& block : model.blocks()) {
    vars.blocks.push_back(bind(tape, block, requires_grad));
  }
  if (model.config().vp_mode) {
    vars.prior_log_variance = requires_grad
                                  ? tape.leaf(model.prior_log_variance())
                                  : tape.constant(model.prior_log_variance());
  }
  return vars;
}

Var permute(const Var& seq, std::size_t t) {
  if (seq.shape().size() != 3) {
    throw ShapeError("permute: expected [B, N, D], got " + to_string(seq.shape()));
  }
  if (t == 0) return seq;
  const std::size_t b = seq.shape()[0];
  const std::size_t n = seq.shape()[1];
  const std::size_t d = seq.shape()[2];
  std::vector<std::size_t> rows(b * n);
  for (std::size_t e = 0; e < b; ++e) {
    for (std::size_t i = 0; i < n; ++i) rows[e * n + i] = e * n + n - 1 - i;
  }
  return reshape(gather_rows(reshape(seq, {b * n, d}), std::move(rows)), {b, n, d});
}

BlockTransform flow_block_forward(const TarFlowModel& model,
                                  const ModelVars& vars, std::size_t t,
                                  const Var& z, std::span<const std::size_t> labels) {
  if (t >= model.num_blocks()) {
    throw ParameterError("block index " + std::to_string(t) + " out of range");
  }
  const Shape& shape = z.shape();
  if (shape.size() != 3 || shape[1] != model.seq_len() ||
      shape[2] != model.token_dim()) {
    throw ShapeError("flow_block_forward: input " + to_string(shape) +
                     " does not match [B, " + std::to_string(model.seq_len()) +
                     ", " + std::to_string(model.token_dim()) + "]");
  }
  const std::size_t batch = shape[0];
  const std::size_t n = shape[1];
  const std::size_t d = shape[2];
  const FlowBlockParams& params = model.blocks()[t];

  Var z_tilde = permute(z, t);
  const BlockPrediction pred =
      block_forward(params, vars.blocks[t], z_tilde, labels, 1.0);
  const Tensor mask = first_row_mask(n);
  Var mu = mul(reshape(pred.mu, {batch, n, d}), mask);

  if (model.config().vp_mode) {
    Var z_next = z_tilde - mu;
    if (!all_finite(z_next.value())) throw_range(t, 0.0);
    return {z_next, z.tape().constant(Tensor::zeros({batch}))};
  }

  Var alpha = mul(reshape(pred.alpha, {batch, n, d}), mask);
  Var z_next = (z_tilde - mu) * exp(-alpha);
  if (!all_finite(z_next.value())) throw_range(t, max_abs(alpha.value()));
  Var logdet = neg(sum(reshape(cast(alpha, Precision::f64), {batch, n * d}), 1));
  return {z_next, logdet, max_abs(alpha.value())};
}

FlowTrace model_forward(const TarFlowModel& model, const ModelVars& vars,
                        const Var& x, std::span<const std::size_t> labels) {
  Var z = x;
  Var logdet;
  double alpha_max = 0.0;
  for (std::size_t t = 0; t < model.num_blocks(); ++t) {
    BlockTransform step = flow_block_forward(model, vars, t, z, labels);
    z = step.z_next;
    logdet = logdet.valid() ? logdet + step.logdet : step.logdet;
    alpha_max = std::max(alpha_max, step.max_abs_alpha);
  }
  return {z, logdet, alpha_max};
}

Var prior_energy(const TarFlowModel& model, const ModelVars& vars, const Var& z) {
  const std::size_t batch = z.shape()[0];
  const std::size_t dims = model.seq_len() * model.token_dim();
  Var z64 = cast(z, Precision::f64);
  Var quad;
  if (model.config().vp_mode) {
    const Var& log_var = vars.prior_log_variance;
    Var scaled = square(z64) * exp(-log_var);
    quad = sum(reshape(scaled, {batch, dims}), 1) + sum(log_var);
  } else {
    quad = sum(reshape(square(z64), {batch, dims}), 1);
  }
  return scale(quad, 0.5);
}

Var prior_log_prob(const TarFlowModel& model, const ModelVars& vars,
                   const Var& z) {
  const std::size_t dims = model.seq_len() * model.token_dim();
  const double constant = 0.5 * static_cast<double>(dims) *
                          std::log(2.0 * std::numbers::pi);
  return sub(neg(prior_energy(model, vars, z)), Tensor::scalar(constant));
}

Var log_prob(const TarFlowModel& model, const ModelVars& vars, const Var& x,
             std::span<const std::size_t> labels) {
  const FlowTrace trace = model_forward(model, vars, x, labels);
  return prior_log_prob(model, vars, trace.z) + trace.logdet;
}

std::pair<Tensor, double> flow_block_forward(const TarFlowModel& model,
                                             std::size_t t, const Tensor& z,
                                             std::optional<std::size_t> label) {
  check_sequence(model, z, "flow_block_forward");
  Tape tape;
  const ModelVars vars = bind(tape, model, false);
  const auto labels = label_vector(label);
  const BlockTransform out =
      flow_block_forward(model, vars, t, tape.constant(as_batch(z)), labels);
  return {reshape(out.z_next.value(), z.shape()), out.logdet.value()[0]};
}

Tensor flow_block_inverse(const TarFlowModel& model, std::size_t t,
                          const Tensor& z_next, std::optional<std::size_t> label,
                          const GuidanceSpec& guidance,
                          const InverseOptions& options) {
  check_sequence(model, z_next, "flow_block_inverse");
  if (t >= model.num_blocks()) {
    throw ParameterError("block index " + std::to_string(t) + " out of range");
  }
  guidance.validate();
  const FlowBlockParams& params = model.blocks()[t];
  const BlockShape& shape = params.shape;
  if (guidance.mode == GuidanceMode::conditional && !shape.conditional()) {
    throw ParameterError("conditional guidance needs a class-conditional model");
  }

  std::optional<std::size_t> ref_label = label;
  double ref_temperature = 1.0;
  if (guidance.mode == GuidanceMode::conditional) {
    ref_label = shape.null_label();
  } else if (guidance.mode == GuidanceMode::unconditional) {
    ref_temperature = guidance.temperature;
  }

  const std::size_t n = shape.seq_len;
  const std::size_t d = shape.token_dim;
  const bool vp = model.config().vp_mode;
  Tensor z_tilde(z_next.shape(), z_next.precision());
  auto zt = z_tilde.mutable_data();
  std::copy_n(z_next.data().begin(), d, zt.begin());

  DecodeCache main_cache(shape);
  DecodeCache ref_cache(shape);
  for (std::size_t i = 1; i < n; ++i) {
    const Tensor token = slice(z_tilde, 0, i - 1, i);
    auto [mu, alpha] = block_step(main_cache, token, label, params, 1.0);
    if (guidance.active()) {
      const auto [mu_ref, alpha_ref] =
          block_step(ref_cache, token, ref_label, params, ref_temperature);
      const double w = guidance_weight_at(i, n, model.num_blocks(), guidance);
      std::tie(mu, alpha) = guided_prediction(mu, alpha, mu_ref, alpha_ref, w);
    }
    double alpha_max = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double a = vp ? 0.0 : alpha[j];
      if (options.clamp_alpha) {
        a = std::clamp(a, -options.alpha_limit, options.alpha_limit);
      }
      alpha_max = std::max(alpha_max, std::abs(a));
      const double v = z_next[i * d + j] * std::exp(a) + mu[j];
      if (!std::isfinite(v)) {
        throw NumericalRangeError(
            "flow block " + std::to_string(t) + " inverse at position " +
            std::to_string(i) + " produced a non-finite value (|alpha| = " +
            format_number(alpha_max) + ")");
      }
      zt[i * d + j] = v;
    }
    // Keep the fed-back token at model precision.
    if (z_tilde.precision() == Precision::f32) {
      for (std::size_t j = 0; j < d; ++j) {
        zt[i * d + j] = static_cast<double>(static_cast<float>(zt[i * d + j]));
      }
    }
  }
  return permute(z_tilde, t);
}

std::pair<Tensor, double> model_forward(const TarFlowModel& model,
                                        const Tensor& x,
                                        std::optional<std::size_t> label) {
  check_sequence(model, x, "model_forward");
  Tape tape;
  const ModelVars vars = bind(tape, model, false);
  const auto labels = label_vector(label);
  const FlowTrace trace = model_forward(model, vars, tape.constant(as_batch(x)), labels);
  return {reshape(trace.z.value(), x.shape()), trace.logdet.value()[0]};
}

Tensor model_inverse(const TarFlowModel& model, const Tensor& z,
                     std::optional<std::size_t> label,
                     const GuidanceSpec& guidance, const InverseOptions& options,
                     std::vector<Tensor>* trajectory) {
  check_sequence(model, z, "model_inverse");
  if (trajectory) {
    trajectory->clear();
    trajectory->push_back(z);
  }
  Tensor current = z;
  for (std::size_t t = model.num_blocks(); t-- > 0;) {
    current = flow_block_inverse(model, t, current, label, guidance, options);
    if (trajectory) trajectory->push_back(current);
  }
  return current;
}

double log_prob(const TarFlowModel& model, const Tensor& x,
                std::optional<std::size_t> label) {
  check_sequence(model, x, "log_prob");
  const auto labels = label_vector(label);
  return log_prob_batch(model, as_batch(x), labels).front();
}

std::vector<double> log_prob_batch(const TarFlowModel& model, const Tensor& xs,
                                   std::span<const std::size_t> labels,
                                   std::size_t chunk) {
  if (xs.rank() != 3 || xs.dim(1) != model.seq_len() ||
      xs.dim(2) != model.token_dim()) {
    throw ShapeError("log_prob_batch: input " + to_string(xs.shape()) +
                     " does not match [B, " + std::to_string(model.seq_len()) +
                     ", " + std::to_string(model.token_dim()) + "]");
  }
  const std::size_t batch = xs.dim(0);
  if (!labels.empty() && labels.size() != batch) {
    throw ShapeError("log_prob_batch: " + std::to_string(labels.size()) +
                     " labels for batch " + std::to_string(batch));
  }
  chunk = std::max<std::size_t>(chunk, 1);
  std::vector<double> out;
  out.reserve(batch);
  for (std::size_t begin = 0; begin < batch; begin += chunk) {
    const std::size_t end = std::min(batch, begin + chunk);
    Tape tape;
    const ModelVars vars = bind(tape, model, false);
    Var x = tape.constant(slice(xs, 0, begin, end));
    const auto sub_labels =
        labels.empty() ? labels : labels.subspan(begin, end - begin);
    const Var lp = log_prob(model, vars, x, sub_labels);
    out.insert(out.end(), lp.value().data().begin(), lp.value().data().end());
  }
  return out;
}

}  // namespace tarflow
