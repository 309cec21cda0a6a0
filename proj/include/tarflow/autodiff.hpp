#pragma once

// Reverse-mode differentiation over a recorded tape of tensor operations.
//
// Nodes are appended in evaluation order, which is a topological order of
// the graph, so the backward sweep walks the node list once from the seed
// down to the first node. Each node stores its forward value and a closure
// that maps the output adjoint to adjoints of its inputs.

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <vector>

#include "tarflow/tensor.hpp"

namespace tarflow {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; the Tape must outlive
/// every Var that refers to it.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Adjoints of every leaf reached from the seed. Leaves that were not reached
/// (or were recorded as constants) report a zero gradient.
class Gradients {
 public:
  Tensor operator[](const Var& leaf) const;
  bool contains(const Var& leaf) const;

 private:
  friend class Tape;
  std::vector<std::optional<Tensor>> grads_;
  std::vector<Shape> shapes_;
};

// Receives input adjoints from a node's backward closure.
class GradSink {
 public:
  // Adds `grad` to the adjoint of input number `input`.
  void accumulate(std::size_t input, Tensor grad);
  bool wants(std::size_t input) const;
  // Forward value of the node being differentiated.
  const Tensor& output() const { return output_; }

 private:
  friend class Tape;
  GradSink(Tape& tape, std::span<const std::size_t> parents,
           const Tensor& output)
      : tape_(tape), parents_(parents), output_(output) {}
  Tape& tape_;
  std::span<const std::size_t> parents_;
  const Tensor& output_;
};

class Tape {
 public:
  using Backward = std::function<void(const Tensor& grad_out, GradSink& sink)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);

  // Records an op. `backward` is dropped when no input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs,
             Backward backward);
  Var record(Tensor value, std::span<const Var> inputs, Backward backward);

  // Seed must be a single-element tensor. Throws ShapeError otherwise.
  Gradients backward(const Var& output);

  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Var;
  friend class GradSink;

  struct Node {
    Tensor value;
    std::vector<std::size_t> parents;
    Backward backward;
    bool requires_grad = false;
  };

  // deque keeps node addresses stable, so value() references stay valid.
  std::deque<Node> nodes_;
  std::vector<std::optional<Tensor>>* active_grads_ = nullptr;
};

// Differentiable counterparts of the tensor operations. Binary operations
// broadcast like their Tensor versions and reduce adjoints back to each
// operand's shape.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add(const Var& a, const Tensor& b);
Var sub(const Var& a, const Tensor& b);
Var mul(const Var& a, const Tensor& b);
Var neg(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var scale(const Var& a, double factor);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);
Var concat(std::span<const Var> parts, std::size_t axis);
Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end);
Var sum(const Var& a);
Var sum(const Var& a, std::size_t axis);
Var mean(const Var& a);
Var mean(const Var& a, std::size_t axis);
Var softmax(const Var& logits, std::size_t axis);
Var gather_rows(const Var& a, std::vector<std::size_t> indices);
Var layer_norm(const Var& x, double eps);
Var gelu(const Var& x);
Var cast(const Var& a, Precision precision);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }

}  // namespace tarflow
