#include "tarflow/autodiff.hpp"

#include <cmath>

#include "tarflow/errors.hpp"

namespace tarflow {
namespace {

void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.mutable_data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  dst.round_to_precision();
}

Shape with_unit_axis(Shape shape, std::size_t axis) {
  shape.insert(shape.begin() + static_cast<std::ptrdiff_t>(axis), 1);
  return shape;
}

// Places `g` at [begin, begin + g.dim(axis)) of a zero tensor shaped `shape`.
Tensor embed_slice(const Tensor& g, const Shape& shape, std::size_t axis,
                   std::size_t begin) {
  Tensor out(shape, g.precision());
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  const std::size_t count = g.shape()[axis] * inner;
  auto o = out.mutable_data();
  auto src = g.data();
  for (std::size_t i = 0; i < outer; ++i) {
    std::copy_n(src.begin() + i * count, count,
                o.begin() + (i * len + begin) * inner);
  }
  return out;
}

void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) {
    throw std::invalid_argument("operands recorded on different tapes");
  }
}

}  // namespace

const Tensor& Var::value() const { return tape_->nodes_[id_].value; }

bool Var::requires_grad() const { return tape_->nodes_[id_].requires_grad; }

Tensor Gradients::operator[](const Var& leaf) const {
  if (leaf.id() < grads_.size() && grads_[leaf.id()]) {
    return *grads_[leaf.id()];
  }
  return Tensor::zeros(leaf.shape(), leaf.value().precision());
}

bool Gradients::contains(const Var& leaf) const {
  return leaf.id() < grads_.size() && grads_[leaf.id()].has_value();
}

void GradSink::accumulate(std::size_t input, Tensor grad) {
  const std::size_t parent = parents_[input];
  const auto& node = tape_.nodes_[parent];
  if (!node.requires_grad) return;
  if (grad.shape() != node.value.shape()) {
    throw ShapeError("backward produced adjoint " + to_string(grad.shape()) +
                     " for input " + to_string(node.value.shape()));
  }
  auto& slot = (*tape_.active_grads_)[parent];
  if (slot) {
    add_into(*slot, grad);
  } else {
    slot = std::move(grad);
  }
}

bool GradSink::wants(std::size_t input) const {
  return tape_.nodes_[parents_[input]].requires_grad;
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs,
                 Backward backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Backward backward) {
  Node node{std::move(value), {}, nullptr, false};
  node.parents.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.tape() != this) {
      throw std::invalid_argument("input recorded on a different tape");
    }
    node.parents.push_back(v.id());
    node.requires_grad = node.requires_grad || v.requires_grad();
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(const Var& output) {
  if (&output.tape() != this) {
    throw std::invalid_argument("seed recorded on a different tape");
  }
  if (output.value().size() != 1) {
    throw ShapeError("backward needs a scalar seed, got shape " +
                     to_string(output.shape()));
  }
  std::vector<std::optional<Tensor>> grads(nodes_.size());
  grads[output.id()] =
      Tensor::ones(output.shape(), output.value().precision());
  active_grads_ = &grads;
  for (std::size_t id = output.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!grads[id] || !node.backward) continue;
    GradSink sink(*this, node.parents, node.value);
    try {
      node.backward(*grads[id], sink);
    } catch (...) {
      active_grads_ = nullptr;
      throw;
    }
    // Interior adjoints are no longer needed once propagated.
    if (!node.parents.empty()) grads[id].reset();
  }
  active_grads_ = nullptr;

  Gradients result;
  result.grads_ = std::move(grads);
  return result;
}

Var add(const Var& a, const Var& b) {
  require_same_tape(a, b);
  return a.tape().record(add(a.value(), b.value()), {a, b},
                         [a, b](const Tensor& g, GradSink& s) {
                           if (s.wants(0)) s.accumulate(0, reduce_to_shape(g, a.shape()));
                           if (s.wants(1)) s.accumulate(1, reduce_to_shape(g, b.shape()));
                         });
}

Var sub(const Var& a, const Var& b) {
  require_same_tape(a, b);
  return a.tape().record(sub(a.value(), b.value()), {a, b},
                         [a, b](const Tensor& g, GradSink& s) {
                           if (s.wants(0)) s.accumulate(0, reduce_to_shape(g, a.shape()));
                           if (s.wants(1)) s.accumulate(1, reduce_to_shape(neg(g), b.shape()));
                         });
}

Var mul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  return a.tape().record(
      mul(a.value(), b.value()), {a, b}, [a, b](const Tensor& g, GradSink& s) {
        if (s.wants(0)) s.accumulate(0, reduce_to_shape(mul(g, b.value()), a.shape()));
        if (s.wants(1)) s.accumulate(1, reduce_to_shape(mul(g, a.value()), b.shape()));
      });
}

Var div(const Var& a, const Var& b) {
  require_same_tape(a, b);
  return a.tape().record(
      div(a.value(), b.value()), {a, b}, [a, b](const Tensor& g, GradSink& s) {
        const Tensor ga = div(g, b.value());
        if (s.wants(0)) s.accumulate(0, reduce_to_shape(ga, a.shape()));
        if (s.wants(1)) {
          const Tensor gb = neg(div(mul(ga, a.value()), b.value()));
          s.accumulate(1, reduce_to_shape(gb, b.shape()));
        }
      });
}

Var add(const Var& a, const Tensor& b) { return add(a, a.tape().constant(b)); }
Var sub(const Var& a, const Tensor& b) { return sub(a, a.tape().constant(b)); }
Var mul(const Var& a, const Tensor& b) { return mul(a, a.tape().constant(b)); }

Var neg(const Var& a) {
  return a.tape().record(neg(a.value()), {a},
                         [](const Tensor& g, GradSink& s) { s.accumulate(0, neg(g)); });
}

Var exp(const Var& a) {
  return a.tape().record(exp(a.value()), {a}, [](const Tensor& g, GradSink& s) {
    s.accumulate(0, mul(g, s.output()));
  });
}

Var log(const Var& a) {
  return a.tape().record(log(a.value()), {a}, [a](const Tensor& g, GradSink& s) {
    s.accumulate(0, div(g, a.value()));
  });
}

Var square(const Var& a) {
  return a.tape().record(square(a.value()), {a}, [a](const Tensor& g, GradSink& s) {
    s.accumulate(0, mul(g, scale(a.value(), 2.0)));
  });
}

Var scale(const Var& a, double factor) {
  return a.tape().record(scale(a.value(), factor), {a},
                         [factor](const Tensor& g, GradSink& s) {
                           s.accumulate(0, scale(g, factor));
                         });
}

Var matmul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  return a.tape().record(
      matmul(a.value(), b.value()), {a, b}, [a, b](const Tensor& g, GradSink& s) {
        if (s.wants(0)) s.accumulate(0, matmul(g, b.value(), false, true));
        if (s.wants(1)) s.accumulate(1, matmul(a.value(), g, true, false));
      });
}

Var transpose(const Var& a) {
  return a.tape().record(transpose(a.value()), {a},
                         [](const Tensor& g, GradSink& s) { s.accumulate(0, transpose(g)); });
}

Var reshape(const Var& a, Shape shape) {
  return a.tape().record(reshape(a.value(), std::move(shape)), {a},
                         [a](const Tensor& g, GradSink& s) {
                           s.accumulate(0, reshape(g, a.shape()));
                         });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  std::vector<Tensor> values;
  std::vector<std::size_t> lengths;
  values.reserve(parts.size());
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p);
    values.push_back(p.value());
    lengths.push_back(p.value().rank() > axis ? p.shape()[axis] : 0);
  }
  Tensor out = concat(values, axis);
  return parts.front().tape().record(
      std::move(out), parts, [lengths, axis](const Tensor& g, GradSink& s) {
        std::size_t begin = 0;
        for (std::size_t i = 0; i < lengths.size(); ++i) {
          if (s.wants(i)) s.accumulate(i, slice(g, axis, begin, begin + lengths[i]));
          begin += lengths[i];
        }
      });
}

Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  return a.tape().record(slice(a.value(), axis, begin, end), {a},
                         [a, axis, begin](const Tensor& g, GradSink& s) {
                           s.accumulate(0, embed_slice(g, a.shape(), axis, begin));
                         });
}

Var sum(const Var& a) {
  return a.tape().record(sum(a.value()), {a}, [a](const Tensor& g, GradSink& s) {
    s.accumulate(0, Tensor::full(a.shape(), g.item(), g.precision()));
  });
}

Var sum(const Var& a, std::size_t axis) {
  return a.tape().record(sum(a.value(), axis), {a},
                         [a, axis](const Tensor& g, GradSink& s) {
                           const Tensor expanded = reshape(g, with_unit_axis(g.shape(), axis));
                           s.accumulate(0, add(Tensor::zeros(a.shape(), g.precision()), expanded));
                         });
}

Var mean(const Var& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var mean(const Var& a, std::size_t axis) {
  return scale(sum(a, axis), 1.0 / static_cast<double>(a.shape().at(axis)));
}

Var softmax(const Var& logits, std::size_t axis) {
  return logits.tape().record(
      softmax(logits.value(), axis), {logits},
      [axis](const Tensor& g, GradSink& s) {
        const Tensor& y = s.output();
        const Tensor dot = sum(mul(g, y), axis);
        const Tensor centered = sub(g, reshape(dot, with_unit_axis(dot.shape(), axis)));
        s.accumulate(0, mul(y, centered));
      });
}

Var gather_rows(const Var& a, std::vector<std::size_t> indices) {
  Tensor out = gather_rows(a.value(), indices);
  const std::size_t rows = a.shape().at(0);
  return a.tape().record(std::move(out), {a},
                         [indices = std::move(indices), rows](const Tensor& g, GradSink& s) {
                           s.accumulate(0, scatter_add_rows(g, indices, rows));
                         });
}

Var layer_norm(const Var& x, double eps) {
  return x.tape().record(
      layer_norm(x.value(), eps), {x}, [x, eps](const Tensor& g, GradSink& s) {
        const Tensor& in = x.value();
        const std::size_t cols = in.shape().back();
        const std::size_t rows = in.size() / cols;
        Tensor dx(in.shape(), g.precision());
        auto out = dx.mutable_data();
        auto xi = in.data();
        auto gi = g.data();
        const double n = static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* row = xi.data() + r * cols;
          const double* grow = gi.data() + r * cols;
          double mu = 0.0;
          for (std::size_t j = 0; j < cols; ++j) mu += row[j];
          mu /= n;
          double var = 0.0;
          for (std::size_t j = 0; j < cols; ++j) var += (row[j] - mu) * (row[j] - mu);
          var /= n;
          const double inv = 1.0 / std::sqrt(var + eps);
          double g_mean = 0.0;
          double gy_mean = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            const double y = (row[j] - mu) * inv;
            g_mean += grow[j];
            gy_mean += grow[j] * y;
          }
          g_mean /= n;
          gy_mean /= n;
          double* dst = out.data() + r * cols;
          for (std::size_t j = 0; j < cols; ++j) {
            const double y = (row[j] - mu) * inv;
            dst[j] = inv * (grow[j] - g_mean - y * gy_mean);
          }
        }
        dx.round_to_precision();
        s.accumulate(0, std::move(dx));
      });
}

Var gelu(const Var& x) {
  return x.tape().record(gelu(x.value()), {x}, [x](const Tensor& g, GradSink& s) {
    s.accumulate(0, mul(g, gelu_derivative(x.value())));
  });
}

Var cast(const Var& a, Precision precision) {
  return a.tape().record(a.value().to(precision), {a},
                         [a](const Tensor& g, GradSink& s) {
                           s.accumulate(0, g.to(a.value().precision()));
                         });
}

}  // namespace tarflow
