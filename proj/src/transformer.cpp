#include "tarflow/transformer.hpp"

#include <Eigen/Core>

#include <cmath>
#include <memory>

#include "tarflow/errors.hpp"

namespace tarflow {
namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Strided = Eigen::OuterStride<>;
using ConstBlock = Eigen::Map<const RowMatrix, 0, Strided>;
using MutBlock = Eigen::Map<RowMatrix, 0, Strided>;

constexpr double kInitStd = 0.02;

Tensor truncated_normal(Shape shape, std::mt19937_64& rng, Precision precision) {
  std::normal_distribution<double> normal(0.0, kInitStd);
  Tensor t(std::move(shape), precision);
  for (double& v : t.mutable_data()) {
    do {
      v = normal(rng);
    } while (std::abs(v) > 2.0 * kInitStd);
  }
  t.round_to_precision();
  return t;
}

// Row-wise affine layer norm: normalize(x) * gain + bias.
Var norm(const Var& x, const Var& gain, const Var& bias) {
  return layer_norm(x, kLayerNormEps) * gain + bias;
}

Var linear(const Var& x, const Var& w, const Var& b) {
  return matmul(x, w) + b;
}

Tensor norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  return add(mul(layer_norm(x, kLayerNormEps), gain), bias);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), b);
}

void check_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("attention temperature must be positive, got " +
                         std::to_string(temperature));
  }
}

std::size_t resolve_label(const BlockShape& shape,
                          std::optional<std::size_t> label) {
  if (!shape.conditional()) {
    if (label) {
      throw ParameterError("class label " + std::to_string(*label) +
                           " given to an unconditional block");
    }
    return 0;
  }
  const std::size_t row = label.value_or(shape.null_label());
  if (row > shape.null_label()) {
    throw ParameterError("class label " + std::to_string(row) +
                         " outside [0, " + std::to_string(shape.null_label()) +
                         "]");
  }
  return row;
}

}  // namespace

void BlockShape::validate() const {
  if (seq_len < 1 || token_dim < 1 || layers < 1) {
    throw ParameterError("block needs N >= 1, D >= 1 and K >= 1");
  }
  if (width == 0 || width % kHeadDim != 0) {
    throw ParameterError("channel width " + std::to_string(width) +
                         " must be a positive multiple of " +
                         std::to_string(kHeadDim));
  }
}

FlowBlockParams FlowBlockParams::init(const BlockShape& shape,
                                      std::mt19937_64& rng,
                                      Precision precision) {
  shape.validate();
  const std::size_t ch = shape.width;
  const std::size_t d = shape.token_dim;
  FlowBlockParams p;
  p.shape = shape;
  auto& w = p.weights;
  w.in_w = truncated_normal({d, ch}, rng, precision);
  w.in_b = Tensor::zeros({ch}, precision);
  w.start = truncated_normal({ch}, rng, precision);
  w.position = truncated_normal({shape.seq_len, ch}, rng, precision);
  if (shape.conditional()) {
    w.class_table = truncated_normal({shape.num_classes + 1, ch}, rng, precision);
  }
  for (std::size_t k = 0; k < shape.layers; ++k) {
    AttentionLayerWeights<Tensor> a;
    a.norm1_gain = Tensor::ones({ch}, precision);
    a.norm1_bias = Tensor::zeros({ch}, precision);
    a.query_w = truncated_normal({ch, ch}, rng, precision);
    a.query_b = Tensor::zeros({ch}, precision);
    a.key_w = truncated_normal({ch, ch}, rng, precision);
    a.key_b = Tensor::zeros({ch}, precision);
    a.value_w = truncated_normal({ch, ch}, rng, precision);
    a.value_b = Tensor::zeros({ch}, precision);
    a.out_w = truncated_normal({ch, ch}, rng, precision);
    a.out_b = Tensor::zeros({ch}, precision);
    a.norm2_gain = Tensor::ones({ch}, precision);
    a.norm2_bias = Tensor::zeros({ch}, precision);
    a.mlp_in_w = truncated_normal({ch, 4 * ch}, rng, precision);
    a.mlp_in_b = Tensor::zeros({4 * ch}, precision);
    a.mlp_out_w = truncated_normal({4 * ch, ch}, rng, precision);
    a.mlp_out_b = Tensor::zeros({ch}, precision);
    w.layers.push_back(std::move(a));
  }
  w.final_gain = Tensor::ones({ch}, precision);
  w.final_bias = Tensor::zeros({ch}, precision);
  w.mu_w = Tensor::zeros({ch, d}, precision);
  w.mu_b = Tensor::zeros({d}, precision);
  w.alpha_w = Tensor::zeros({ch, d}, precision);
  w.alpha_b = Tensor::zeros({d}, precision);
  return p;
}

std::size_t FlowBlockParams::parameter_count() const {
  std::size_t n = 0;
  for_each_weight(shape, [&n](const std::string&, const Tensor& t) { n += t.size(); },
                  weights);
  return n;
}

void FlowBlockParams::set_precision(Precision precision) {
  for_each_weight(shape, [precision](const std::string&, Tensor& t) {
    t = t.to(precision);
  }, weights);
}

BlockWeights<Var> bind(Tape& tape, const FlowBlockParams& params,
                       bool requires_grad) {
  BlockWeights<Var> vars;
  vars.layers.resize(params.weights.layers.size());
  for_each_weight(params.shape,
                  [&](const std::string&, const Tensor& t, Var& v) {
                    v = requires_grad ? tape.leaf(t) : tape.constant(t);
                  },
                  params.weights, vars);
  return vars;
}

Tensor attention_causal(const Tensor& q, const Tensor& k, const Tensor& v,
                        double temperature) {
  check_temperature(temperature);
  if (q.rank() != 2 || k.shape() != q.shape() || v.rank() != 2 ||
      v.dim(0) != q.dim(0)) {
    throw ShapeError("attention_causal: q " + to_string(q.shape()) + ", k " +
                     to_string(k.shape()) + ", v " + to_string(v.shape()));
  }
  const double factor =
      1.0 / (temperature * std::sqrt(static_cast<double>(q.dim(1))));
  Tensor logits = scale(matmul(q, k, false, true), factor);
  const std::size_t len = q.dim(0);
  auto l = logits.mutable_data();
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = i + 1; j < len; ++j) {
      l[i * len + j] = -std::numeric_limits<double>::infinity();
    }
  }
  return matmul(softmax(logits, 1), v);
}

Var attention_causal(const Var& q, const Var& k, const Var& v,
                     std::size_t batch, std::size_t seq, double temperature) {
  check_temperature(temperature);
  const Shape& shape = q.shape();
  if (shape.size() != 2 || shape[0] != batch * seq || k.shape() != shape ||
      v.shape() != shape || shape[1] % kHeadDim != 0) {
    throw ShapeError("attention_causal: q " + to_string(q.shape()) + ", k " +
                     to_string(k.shape()) + ", v " + to_string(v.shape()) +
                     " for batch " + std::to_string(batch) + " x seq " +
                     std::to_string(seq));
  }
  const std::size_t width = shape[1];
  const std::size_t heads = width / kHeadDim;
  const double factor =
      1.0 / (temperature * std::sqrt(static_cast<double>(kHeadDim)));
  const Precision precision =
      promote(promote(q.value().precision(), k.value().precision()),
              v.value().precision());

  auto probs = std::make_shared<std::vector<RowMatrix>>(batch * heads);
  Tensor out(shape, precision);
  const double* qd = q.value().data().data();
  const double* kd = k.value().data().data();
  const double* vd = v.value().data().data();
  double* od = out.mutable_data().data();
  const auto n = static_cast<Eigen::Index>(seq);
  const auto hd = static_cast<Eigen::Index>(kHeadDim);
  const Strided stride(static_cast<Eigen::Index>(width));

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t offset = b * seq * width + h * kHeadDim;
      ConstBlock Q(qd + offset, n, hd, stride);
      ConstBlock K(kd + offset, n, hd, stride);
      ConstBlock V(vd + offset, n, hd, stride);
      RowMatrix& P = (*probs)[b * heads + h];
      P.noalias() = (Q * K.transpose()) * factor;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double peak = P.row(i).head(i + 1).maxCoeff();
        double total = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          P(i, j) = std::exp(P(i, j) - peak);
          total += P(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) P(i, j) /= total;
        for (Eigen::Index j = i + 1; j < n; ++j) P(i, j) = 0.0;
      }
      MutBlock O(od + offset, n, hd, stride);
      O.noalias() = P * V;
    }
  }
  out.round_to_precision();

  return q.tape().record(
      std::move(out), {q, k, v},
      [q, k, v, probs, batch, seq, heads, width, factor, precision](
          const Tensor& g, GradSink& s) {
        Tensor dq(q.shape(), precision);
        Tensor dk(q.shape(), precision);
        Tensor dv(q.shape(), precision);
        const double* qd = q.value().data().data();
        const double* kd = k.value().data().data();
        const double* vd = v.value().data().data();
        const double* gd = g.data().data();
        const auto n = static_cast<Eigen::Index>(seq);
        const auto hd = static_cast<Eigen::Index>(kHeadDim);
        const Strided stride(static_cast<Eigen::Index>(width));
        RowMatrix dP;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t offset = b * seq * width + h * kHeadDim;
            ConstBlock Q(qd + offset, n, hd, stride);
            ConstBlock K(kd + offset, n, hd, stride);
            ConstBlock V(vd + offset, n, hd, stride);
            ConstBlock dO(gd + offset, n, hd, stride);
            const RowMatrix& P = (*probs)[b * heads + h];
            MutBlock dV(dv.mutable_data().data() + offset, n, hd, stride);
            dV.noalias() = P.transpose() * dO;
            dP.noalias() = dO * V.transpose();
            // Softmax adjoint, then the logit scale.
            const Eigen::VectorXd row_dot = (dP.array() * P.array()).rowwise().sum();
            dP = (P.array() * (dP.array().colwise() - row_dot.array())) * factor;
            MutBlock dQ(dq.mutable_data().data() + offset, n, hd, stride);
            MutBlock dK(dk.mutable_data().data() + offset, n, hd, stride);
            dQ.noalias() = dP * K;
            dK.noalias() = dP.transpose() * Q;
          }
        }
        dq.round_to_precision();
        dk.round_to_precision();
        dv.round_to_precision();
        if (s.wants(0)) s.accumulate(0, std::move(dq));
        if (s.wants(1)) s.accumulate(1, std::move(dk));
        if (s.wants(2)) s.accumulate(2, std::move(dv));
      });
}

BlockPrediction block_forward(const FlowBlockParams& params,
                              const BlockWeights<Var>& w, const Var& seq,
                              std::span<const std::size_t> labels,
                              double temperature) {
  const BlockShape& shape = params.shape;
  check_temperature(temperature);
  if (seq.shape().size() != 3 || seq.shape()[1] != shape.seq_len ||
      seq.shape()[2] != shape.token_dim) {
    throw ShapeError("block_forward: sequence " + to_string(seq.shape()) +
                     " does not match [batch, " + std::to_string(shape.seq_len) +
                     ", " + std::to_string(shape.token_dim) + "]");
  }
  const std::size_t batch = seq.shape()[0];
  const std::size_t n = shape.seq_len;
  const std::size_t ch = shape.width;

  Var tokens = reshape(seq, {batch * n, shape.token_dim});
  Var projected = linear(tokens, w.in_w, w.in_b);
  const Var parts[] = {projected, reshape(w.start, {1, ch})};
  Var stacked = concat(parts, 0);
  std::vector<std::size_t> shift(batch * n);
  for (std::size_t b = 0; b < batch; ++b) {
    shift[b * n] = batch * n;
    for (std::size_t i = 1; i < n; ++i) shift[b * n + i] = b * n + i - 1;
  }
  Var h = reshape(gather_rows(stacked, std::move(shift)), {batch, n, ch});
  h = h + w.position;

  if (shape.conditional()) {
    std::vector<std::size_t> rows(batch, shape.null_label());
    if (!labels.empty()) {
      if (labels.size() != batch) {
        throw ShapeError("block_forward: " + std::to_string(labels.size()) +
                         " labels for batch " + std::to_string(batch));
      }
      for (std::size_t b = 0; b < batch; ++b) rows[b] = resolve_label(shape, labels[b]);
    }
    h = h + reshape(gather_rows(w.class_table, std::move(rows)), {batch, 1, ch});
  } else if (!labels.empty()) {
    throw ParameterError("class labels given to an unconditional block");
  }
  h = reshape(h, {batch * n, ch});

  for (const auto& layer : w.layers) {
    Var a = norm(h, layer.norm1_gain, layer.norm1_bias);
    Var q = linear(a, layer.query_w, layer.query_b);
    Var k = linear(a, layer.key_w, layer.key_b);
    Var v = linear(a, layer.value_w, layer.value_b);
    Var attended = attention_causal(q, k, v, batch, n, temperature);
    h = h + linear(attended, layer.out_w, layer.out_b);
    Var m = norm(h, layer.norm2_gain, layer.norm2_bias);
    Var hidden = gelu(linear(m, layer.mlp_in_w, layer.mlp_in_b));
    h = h + linear(hidden, layer.mlp_out_w, layer.mlp_out_b);
  }
  Var f = norm(h, w.final_gain, w.final_bias);
  return {linear(f, w.mu_w, w.mu_b), linear(f, w.alpha_w, w.alpha_b)};
}

std::pair<Tensor, Tensor> block_forward(const Tensor& seq,
                                        std::optional<std::size_t> label,
                                        const FlowBlockParams& params,
                                        double temperature) {
  const BlockShape& shape = params.shape;
  if (seq.rank() != 2) {
    throw ShapeError("block_forward: expected [N, D], got " + to_string(seq.shape()));
  }
  Tape tape;
  const auto w = bind(tape, params, false);
  Var x = tape.constant(reshape(seq, {1, seq.dim(0), seq.dim(1)}));
  std::vector<std::size_t> labels;
  if (label) {
    resolve_label(shape, label);
    labels.push_back(*label);
  }
  const auto pred = block_forward(params, w, x, labels, temperature);
  return {pred.mu.value(), pred.alpha.value()};
}

DecodeCache::DecodeCache(const BlockShape& shape)
    : shape_(shape), keys_(shape.layers), values_(shape.layers) {
  shape.validate();
  for (std::size_t k = 0; k < shape.layers; ++k) {
    keys_[k].reserve(shape.seq_len * shape.width);
    values_[k].reserve(shape.seq_len * shape.width);
  }
}

std::pair<Tensor, Tensor> block_step(DecodeCache& cache, const Tensor& token,
                                     std::optional<std::size_t> label,
                                     const FlowBlockParams& params,
                                     double temperature) {
  const BlockShape& shape = params.shape;
  check_temperature(temperature);
  if (!(cache.shape_ == shape)) {
    throw ShapeError("block_step: cache built for a different block shape");
  }
  if (token.size() != shape.token_dim) {
    throw ShapeError("block_step: token " + to_string(token.shape()) +
                     " does not have D = " + std::to_string(shape.token_dim) +
                     " values");
  }
  if (cache.length_ + 1 >= shape.seq_len) {
    throw ParameterError("block_step: cache full (" +
                         std::to_string(cache.length_) + " of " +
                         std::to_string(shape.seq_len) + " positions consumed)");
  }
  const std::size_t class_row = resolve_label(shape, label);
  const auto& w = params.weights;
  const std::size_t ch = shape.width;
  const std::size_t heads = shape.heads();
  const double factor =
      1.0 / (temperature * std::sqrt(static_cast<double>(kHeadDim)));

  auto run_slot = [&](std::size_t slot, Tensor h) -> std::pair<Tensor, Tensor> {
    h = add(h, slice(w.position, 0, slot, slot + 1));
    if (shape.conditional()) {
      h = add(h, slice(w.class_table, 0, class_row, class_row + 1));
    }
    for (std::size_t k = 0; k < shape.layers; ++k) {
      const auto& layer = w.layers[k];
      const Tensor a = norm(h, layer.norm1_gain, layer.norm1_bias);
      const Tensor q = linear(a, layer.query_w, layer.query_b);
      const Tensor key = linear(a, layer.key_w, layer.key_b);
      const Tensor val = linear(a, layer.value_w, layer.value_b);
      auto& keys = cache.keys_[k];
      auto& values = cache.values_[k];
      keys.insert(keys.end(), key.data().begin(), key.data().end());
      values.insert(values.end(), val.data().begin(), val.data().end());

      Tensor attended({1, ch}, h.precision());
      auto o = attended.mutable_data();
      std::vector<double> p(slot + 1);
      for (std::size_t hh = 0; hh < heads; ++hh) {
        const std::size_t c0 = hh * kHeadDim;
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= slot; ++j) {
          double dot = 0.0;
          const double* kr = keys.data() + j * ch + c0;
          for (std::size_t c = 0; c < kHeadDim; ++c) dot += q[c0 + c] * kr[c];
          p[j] = dot * factor;
          peak = std::max(peak, p[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j <= slot; ++j) {
          p[j] = std::exp(p[j] - peak);
          total += p[j];
        }
        for (std::size_t j = 0; j <= slot; ++j) {
          const double pj = p[j] / total;
          const double* vr = values.data() + j * ch + c0;
          for (std::size_t c = 0; c < kHeadDim; ++c) o[c0 + c] += pj * vr[c];
        }
      }
      attended.round_to_precision();
      h = add(h, linear(attended, layer.out_w, layer.out_b));
      const Tensor m = norm(h, layer.norm2_gain, layer.norm2_bias);
      const Tensor hidden = gelu(linear(m, layer.mlp_in_w, layer.mlp_in_b));
      h = add(h, linear(hidden, layer.mlp_out_w, layer.mlp_out_b));
    }
    const Tensor f = norm(h, w.final_gain, w.final_bias);
    return {linear(f, w.mu_w, w.mu_b), linear(f, w.alpha_w, w.alpha_b)};
  };

  if (cache.slots_ == 0) {
    run_slot(0, reshape(w.start, {1, ch}));
    cache.slots_ = 1;
  }
  const Tensor row = reshape(token, {1, shape.token_dim});
  auto prediction = run_slot(cache.slots_, linear(row, w.in_w, w.in_b));
  ++cache.slots_;
  ++cache.length_;
  return prediction;
}

}  // namespace tarflow
