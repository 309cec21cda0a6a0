#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "tarflow/errors.hpp"
#include "tarflow/transformer.hpp"
#include "test_support.hpp"

namespace tarflow {
namespace {

using testing::random_normal;
using testing::randomize_model;

FlowBlockParams random_block(std::size_t n, std::size_t d, std::size_t layers,
                             std::size_t classes, std::uint64_t seed,
                             std::size_t width = 64) {
  ModelConfig cfg = testing::sequence_config(n, d, 1, layers, classes);
  cfg.width = width;
  TarFlowModel model = TarFlowModel::init(cfg, seed);
  std::mt19937_64 rng(seed + 1);
  randomize_model(model, rng, 0.3);
  return model.blocks()[0];
}

TEST(Attention, SinglePositionReturnsItsValue) {
  std::mt19937_64 rng(1);
  const Tensor q = random_normal({1, 64}, rng);
  const Tensor k = random_normal({1, 64}, rng);
  const Tensor v = random_normal({1, 64}, rng);
  for (double tau : {0.3, 1.0, 7.0}) {
    EXPECT_LT(max_abs_diff(attention_causal(q, k, v, tau), v), 1e-15);
  }
}

TEST(Attention, ZeroQueriesAverageVisibleValues) {
  std::mt19937_64 rng(2);
  const Tensor zeros = Tensor::zeros({3, 64});
  const Tensor v = random_normal({3, 64}, rng);
  const Tensor out = attention_causal(zeros, zeros, v, 1.0);
  const Tensor expected = mean(v, 0);
  for (std::size_t c = 0; c < 64; ++c) {
    EXPECT_NEAR(out.at(2, c), expected[c], 1e-14);
    EXPECT_NEAR(out.at(1, c), 0.5 * (v.at(0, c) + v.at(1, c)), 1e-14);
    EXPECT_EQ(out.at(0, c), v.at(0, c));
  }
}

TEST(Attention, HighTemperatureApproachesUniformAverage) {
  std::mt19937_64 rng(3);
  // Distinct O(0.1) logits, so the residual is well below tolerance.
  const Tensor q = testing::random_tensor({4, 64}, rng, -0.5, 0.5);
  const Tensor k = testing::random_tensor({4, 64}, rng, -0.5, 0.5);
  const Tensor v = random_normal({4, 64}, rng);
  const Tensor out = attention_causal(q, k, v, 1e6);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t c = 0; c < 64; ++c) {
      double avg = 0.0;
      for (std::size_t j = 0; j <= i; ++j) avg += v.at(j, c);
      avg /= static_cast<double>(i + 1);
      EXPECT_NEAR(out.at(i, c), avg, 1e-6);
    }
  }
}

TEST(Attention, UnitTemperatureIsScaledDotProduct) {
  std::mt19937_64 rng(4);
  const Tensor q = random_normal({5, 64}, rng);
  const Tensor k = random_normal({5, 64}, rng);
  const Tensor v = random_normal({5, 64}, rng);
  const Tensor out = attention_causal(q, k, v, 1.0);
  for (std::size_t i = 0; i < 5; ++i) {
    std::vector<double> w(i + 1);
    double total = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < 64; ++c) dot += q.at(i, c) * k.at(j, c);
      w[j] = std::exp(dot / 8.0);
      total += w[j];
    }
    for (std::size_t c = 0; c < 64; ++c) {
      double expected = 0.0;
      for (std::size_t j = 0; j <= i; ++j) expected += w[j] / total * v.at(j, c);
      EXPECT_NEAR(out.at(i, c), expected, 1e-12);
    }
  }
}

TEST(Attention, NonPositiveTemperatureIsRejected) {
  const Tensor x = Tensor::zeros({2, 64});
  EXPECT_THROW(attention_causal(x, x, x, 0.0), ParameterError);
  EXPECT_THROW(attention_causal(x, x, x, -1.0), ParameterError);
}

TEST(Attention, BatchedMultiHeadMatchesPerHeadReference) {
  std::mt19937_64 rng(5);
  const std::size_t batch = 2, seq = 3, width = 128;
  const Tensor q = random_normal({batch * seq, width}, rng);
  const Tensor k = random_normal({batch * seq, width}, rng);
  const Tensor v = random_normal({batch * seq, width}, rng);
  Tape tape;
  const Var out = attention_causal(tape.constant(q), tape.constant(k),
                                   tape.constant(v), batch, seq, 1.3);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < 2; ++h) {
      auto block = [&](const Tensor& t) {
        return slice(slice(t, 0, b * seq, (b + 1) * seq), 1, h * 64, (h + 1) * 64);
      };
      const Tensor ref = attention_causal(block(q), block(k), block(v), 1.3);
      EXPECT_LT(max_abs_diff(block(out.value()), ref), 1e-13);
    }
  }
}

TEST(Attention, BatchedGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  const std::size_t batch = 2, seq = 3, width = 64;
  std::vector<Tensor> inputs;
  for (int i = 0; i < 3; ++i) {
    inputs.push_back(testing::random_tensor({batch * seq, width}, rng));
  }
  const Tensor weight = testing::random_tensor({batch * seq, width}, rng);
  auto objective = [&](const std::vector<Tensor>& xs) {
    Tape tape;
    const Var out = attention_causal(tape.constant(xs[0]), tape.constant(xs[1]),
                                     tape.constant(xs[2]), batch, seq, 0.8);
    return sum(mul(out, weight)).value().item();
  };
  Tape tape;
  const Var q = tape.leaf(inputs[0]);
  const Var k = tape.leaf(inputs[1]);
  const Var v = tape.leaf(inputs[2]);
  const Gradients grads = tape.backward(
      sum(mul(attention_causal(q, k, v, batch, seq, 0.8), weight)));
  const Var vars[] = {q, k, v};
  for (std::size_t i = 0; i < 3; ++i) {
    const Tensor numeric = testing::finite_difference(
        [&](const Tensor& x) {
          auto xs = inputs;
          xs[i] = x;
          return objective(xs);
        },
        inputs[i]);
    EXPECT_LT(testing::max_relative_error(grads[vars[i]], numeric), 1e-4) << i;
  }
}

TEST(FlowBlockParams, WidthMustBeMultipleOfHeadDim) {
  std::mt19937_64 rng(0);
  EXPECT_THROW(FlowBlockParams::init(BlockShape{4, 2, 100, 1, 0}, rng),
               ParameterError);
}

TEST(FlowBlockParams, HeadsStartAtZero) {
  std::mt19937_64 rng(0);
  const auto p = FlowBlockParams::init(BlockShape{4, 2, 64, 2, 3}, rng);
  for (const Tensor* t : {&p.weights.mu_w, &p.weights.mu_b, &p.weights.alpha_w,
                          &p.weights.alpha_b}) {
    EXPECT_EQ(max_abs(*t), 0.0);
  }
  EXPECT_GT(max_abs(p.weights.in_w), 0.0);
  EXPECT_LE(max_abs(p.weights.in_w), 0.04);
  EXPECT_EQ(p.weights.class_table.shape(), (Shape{4, 64}));
}

TEST(BlockForward, FreshParamsPredictZeros) {
  std::mt19937_64 rng(7);
  const auto p = FlowBlockParams::init(BlockShape{5, 3, 64, 2, 0}, rng);
  const auto [mu, alpha] = block_forward(random_normal({5, 3}, rng), {}, p);
  EXPECT_EQ(max_abs(mu), 0.0);
  EXPECT_EQ(max_abs(alpha), 0.0);
}

TEST(BlockForward, PerturbingRowOnlyChangesLaterRows) {
  const auto p = random_block(6, 2, 2, 0, 8);
  std::mt19937_64 rng(9);
  const Tensor seq = random_normal({6, 2}, rng);
  const auto [mu0, alpha0] = block_forward(seq, {}, p);
  for (std::size_t j = 0; j < 6; ++j) {
    Tensor bumped = seq;
    bumped.mutable_data()[j * 2] += 0.5;
    const auto [mu1, alpha1] = block_forward(bumped, {}, p);
    for (std::size_t i = 0; i < 6; ++i) {
      const double diff = std::max(
          max_abs_diff(slice(mu0, 0, i, i + 1), slice(mu1, 0, i, i + 1)),
          max_abs_diff(slice(alpha0, 0, i, i + 1), slice(alpha1, 0, i, i + 1)));
      if (i <= j) {
        EXPECT_EQ(diff, 0.0) << "row " << i << " moved after perturbing row " << j;
      } else {
        EXPECT_GT(diff, 0.0) << "row " << i << " ignored row " << j;
      }
    }
  }
}

TEST(BlockForward, GradientIsStrictlyCausal) {
  const auto p = random_block(5, 3, 2, 0, 10);
  std::mt19937_64 rng(11);
  const Tensor seq = random_normal({1, 5, 3}, rng);
  for (std::size_t i = 0; i < 5; ++i) {
    Tape tape;
    const auto w = bind(tape, p, false);
    const Var x = tape.leaf(seq);
    const auto pred = block_forward(p, w, x, {}, 1.0);
    const Var row = slice(pred.mu, 0, i, i + 1) + slice(pred.alpha, 0, i, i + 1);
    const Tensor g = tape.backward(sum(row))[x];
    for (std::size_t j = 0; j < 5; ++j) {
      const double m = max_abs(slice(reshape(g, {5, 3}), 0, j, j + 1));
      if (j >= i) EXPECT_EQ(m, 0.0) << "d(row " << i << ")/d(token " << j << ")";
    }
  }
}

TEST(BlockForward, NullLabelEqualsNoConditioning) {
  const auto p = random_block(4, 2, 1, 3, 12);
  std::mt19937_64 rng(13);
  const Tensor seq = random_normal({4, 2}, rng);
  const auto a = block_forward(seq, std::nullopt, p);
  const auto b = block_forward(seq, std::size_t{3}, p);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  const auto c = block_forward(seq, std::size_t{1}, p);
  EXPECT_GT(max_abs_diff(a.first, c.first), 0.0);
}

TEST(BlockForward, LabelOutOfRangeIsRejected) {
  const auto p = random_block(4, 2, 1, 3, 14);
  const Tensor seq = Tensor::zeros({4, 2});
  EXPECT_THROW(block_forward(seq, std::size_t{4}, p), ParameterError);
  const auto unconditional = random_block(4, 2, 1, 0, 15);
  EXPECT_THROW(block_forward(seq, std::size_t{0}, unconditional), ParameterError);
}

struct StepCase {
  double temperature;
  bool conditional;
};

void PrintTo(const StepCase& c, std::ostream* os) {
  *os << "tau" << c.temperature << (c.conditional ? "_class" : "_plain");
}

class BlockStepEquivalence : public ::testing::TestWithParam<StepCase> {};

TEST_P(BlockStepEquivalence, SequentialDecodeMatchesParallelRows) {
  const auto [tau, conditional] = GetParam();
  const std::size_t n = 7, d = 3;
  const auto p = random_block(n, d, 2, conditional ? 4 : 0, 16, 128);
  std::mt19937_64 rng(17);
  const Tensor seq = random_normal({n, d}, rng);
  const std::optional<std::size_t> label =
      conditional ? std::optional<std::size_t>(2) : std::nullopt;
  const auto [mu, alpha] = block_forward(seq, label, p, tau);

  DecodeCache cache(p.shape);
  for (std::size_t l = 0; l + 1 < n; ++l) {
    const auto [mu_step, alpha_step] =
        block_step(cache, slice(seq, 0, l, l + 1), label, p, tau);
    EXPECT_LT(max_abs_diff(mu_step, slice(mu, 0, l + 1, l + 2)), 1e-10);
    EXPECT_LT(max_abs_diff(alpha_step, slice(alpha, 0, l + 1, l + 2)), 1e-10);
  }
  EXPECT_EQ(cache.length(), n - 1);
  EXPECT_THROW(block_step(cache, slice(seq, 0, n - 1, n), label, p, tau),
               ParameterError);
}

INSTANTIATE_TEST_SUITE_P(
    TemperaturesAndLabels, BlockStepEquivalence,
    ::testing::Values(StepCase{0.8, false}, StepCase{1.0, false},
                      StepCase{1.5, false}, StepCase{0.8, true},
                      StepCase{1.0, true}, StepCase{1.5, true}));

TEST(BlockStep, FirstStepDependsOnlyOnTokenZero) {
  const auto p = random_block(4, 2, 1, 0, 18);
  std::mt19937_64 rng(19);
  Tensor seq = random_normal({4, 2}, rng);
  DecodeCache cache(p.shape);
  EXPECT_TRUE(cache.empty());
  const auto first = block_step(cache, slice(seq, 0, 0, 1), {}, p);
  EXPECT_EQ(cache.length(), 1u);
  // Any continuation of the sequence leaves the position-1 prediction alone.
  seq.mutable_data()[5] += 3.0;
  const auto [mu, alpha] = block_forward(seq, {}, p);
  EXPECT_LT(max_abs_diff(first.first, slice(mu, 0, 1, 2)), 1e-12);
  EXPECT_LT(max_abs_diff(first.second, slice(alpha, 0, 1, 2)), 1e-12);
}

}  // namespace
}  // namespace tarflow
