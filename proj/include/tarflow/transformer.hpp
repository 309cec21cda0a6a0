#pragma once

// Causal vision transformer used inside each flow block.
//
// The block reads its input sequence shifted right by one slot: slot 0 holds
// a learned start embedding and slot i > 0 holds the projection of token i-1.
// With a causal attention mask the output at slot i is therefore a function
// of tokens 0..i-1 only, which is exactly the dependency the autoregressive
// transform needs for (mu_i, alpha_i).

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tarflow/autodiff.hpp"
#include "tarflow/tensor.hpp"

namespace tarflow {

inline constexpr std::size_t kHeadDim = 64;
inline constexpr double kLayerNormEps = 1e-6;

struct BlockShape {
  std::size_t seq_len = 0;      // N
  std::size_t token_dim = 0;    // D
  std::size_t width = 0;        // Ch
  std::size_t layers = 0;       // K
  std::size_t num_classes = 0;  // 0 for unconditional models

  bool conditional() const { return num_classes > 0; }
  std::size_t heads() const { return width / kHeadDim; }
  // Row of the class table used for the null label.
  std::size_t null_label() const { return num_classes; }
  void validate() const;
  bool operator==(const BlockShape&) const = default;
};

template <class T>
struct AttentionLayerWeights {
  T norm1_gain, norm1_bias;
  T query_w, query_b, key_w, key_b, value_w, value_b, out_w, out_b;
  T norm2_gain, norm2_bias;
  T mlp_in_w, mlp_in_b, mlp_out_w, mlp_out_b;
};

template <class T>
struct BlockWeights {
  T in_w, in_b;   // D -> Ch
  T start;        // [Ch], occupies slot 0
  T position;     // [N, Ch]
  T class_table;  // [num_classes + 1, Ch]; unused when unconditional
  std::vector<AttentionLayerWeights<T>> layers;
  T final_gain, final_bias;
  T mu_w, mu_b, alpha_w, alpha_b;  // Ch -> D heads
};

// Calls f(name, field...) for every weight, walking several structurally
// identical BlockWeights in lockstep. The class table is skipped for
// unconditional shapes.
template <class F, class First, class... Rest>
void for_each_weight(const BlockShape& shape, F&& f, First& first,
                     Rest&... rest) {
  f("in_w", first.in_w, rest.in_w...);
  f("in_b", first.in_b, rest.in_b...);
  f("start", first.start, rest.start...);
  f("position", first.position, rest.position...);
  if (shape.conditional()) f("class_table", first.class_table, rest.class_table...);
  for (std::size_t k = 0; k < first.layers.size(); ++k) {
    const std::string p = "layer" + std::to_string(k) + ".";
    auto& a = first.layers[k];
    f(p + "norm1_gain", a.norm1_gain, rest.layers[k].norm1_gain...);
    f(p + "norm1_bias", a.norm1_bias, rest.layers[k].norm1_bias...);
    f(p + "query_w", a.query_w, rest.layers[k].query_w...);
    f(p + "query_b", a.query_b, rest.layers[k].query_b...);
    f(p + "key_w", a.key_w, rest.layers[k].key_w...);
    f(p + "key_b", a.key_b, rest.layers[k].key_b...);
    f(p + "value_w", a.value_w, rest.layers[k].value_w...);
    f(p + "value_b", a.value_b, rest.layers[k].value_b...);
    f(p + "out_w", a.out_w, rest.layers[k].out_w...);
    f(p + "out_b", a.out_b, rest.layers[k].out_b...);
    f(p + "norm2_gain", a.norm2_gain, rest.layers[k].norm2_gain...);
    f(p + "norm2_bias", a.norm2_bias, rest.layers[k].norm2_bias...);
    f(p + "mlp_in_w", a.mlp_in_w, rest.layers[k].mlp_in_w...);
    f(p + "mlp_in_b", a.mlp_in_b, rest.layers[k].mlp_in_b...);
    f(p + "mlp_out_w", a.mlp_out_w, rest.layers[k].mlp_out_w...);
    f(p + "mlp_out_b", a.mlp_out_b, rest.layers[k].mlp_out_b...);
  }
  f("final_gain", first.final_gain, rest.final_gain...);
  f("final_bias", first.final_bias, rest.final_bias...);
  f("mu_w", first.mu_w, rest.mu_w...);
  f("mu_b", first.mu_b, rest.mu_b...);
  f("alpha_w", first.alpha_w, rest.alpha_w...);
  f("alpha_b", first.alpha_b, rest.alpha_b...);
}

/// Learnable weights of one flow block's transformer.
struct FlowBlockParams {
  BlockShape shape;
  BlockWeights<Tensor> weights;

  // Truncated-normal(0.02) projections and embeddings, unit norm gains,
  // zero biases, and zero mu/alpha heads.
  static FlowBlockParams init(const BlockShape& shape, std::mt19937_64& rng,
                              Precision precision = Precision::f64);

  std::size_t parameter_count() const;
  void set_precision(Precision precision);
};

// Records every weight of `params` on `tape` (as leaves or constants).
BlockWeights<Var> bind(Tape& tape, const FlowBlockParams& params,
                       bool requires_grad);

/// Single-head causal attention on [L, d] matrices. Logits are scaled by
/// 1 / (temperature * sqrt(d)); position i sees positions 0..i.
Tensor attention_causal(const Tensor& q, const Tensor& k, const Tensor& v,
                        double temperature);

// Multi-head causal attention over a batch stored as [batch * seq, heads * 64]
// rows. Differentiable in q, k and v.
Var attention_causal(const Var& q, const Var& k, const Var& v,
                     std::size_t batch, std::size_t seq, double temperature);

struct BlockPrediction {
  Var mu;     // [batch * N, D]
  Var alpha;  // [batch * N, D]
};

// Parallel evaluation over a batch. `seq` is [batch, N, D]; labels is empty
// (no conditioning, the null row on conditional models) or one per example,
// where label == num_classes selects the null row.
BlockPrediction block_forward(const FlowBlockParams& params,
                              const BlockWeights<Var>& weights, const Var& seq,
                              std::span<const std::size_t> labels,
                              double temperature);

// Convenience form on one [N, D] sequence; returns (mu, alpha), each [N, D].
std::pair<Tensor, Tensor> block_forward(const Tensor& seq,
                                        std::optional<std::size_t> label,
                                        const FlowBlockParams& params,
                                        double temperature = 1.0);

/// Keys and values appended per attention layer during sequential decoding.
/// length() counts consumed sequence tokens; the start slot is stored as an
/// extra leading row once the first token arrives.
class DecodeCache {
 public:
  explicit DecodeCache(const BlockShape& shape);

  std::size_t length() const { return length_; }
  std::size_t capacity() const { return shape_.seq_len; }
  bool empty() const { return slots_ == 0; }

 private:
  friend std::pair<Tensor, Tensor> block_step(DecodeCache&, const Tensor&,
                                              std::optional<std::size_t>,
                                              const FlowBlockParams&, double);
  BlockShape shape_;
  std::size_t length_ = 0;
  std::size_t slots_ = 0;
  // Per layer, row-major [slots, width].
  std::vector<std::vector<double>> keys_;
  std::vector<std::vector<double>> values_;
};

// Consumes token number cache.length() ([1, D] or [D]) and returns the
// (mu, alpha) predictions, each [1, D], for the next position. Throws
// ParameterError once the cache already holds N-1 tokens.
std::pair<Tensor, Tensor> block_step(DecodeCache& cache, const Tensor& token,
                                     std::optional<std::size_t> label,
                                     const FlowBlockParams& params,
                                     double temperature = 1.0);

}  // namespace tarflow
