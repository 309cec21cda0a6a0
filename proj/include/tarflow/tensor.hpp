#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace tarflow {

using Shape = std::vector<std::size_t>;

// Storage is always double. In f32 mode every produced value is rounded
// through float, so results are exactly what 32-bit arithmetic would store.
enum class Precision { f64, f32 };

std::string to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major array of reals. A rank-0 tensor is a scalar holding one
/// value. Tensors behave as values: operations never modify their inputs.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, Precision precision = Precision::f64);
  Tensor(Shape shape, std::vector<double> data,
         Precision precision = Precision::f64);

  static Tensor zeros(Shape shape, Precision precision = Precision::f64);
  static Tensor ones(Shape shape, Precision precision = Precision::f64);
  static Tensor full(Shape shape, double value,
                     Precision precision = Precision::f64);
  static Tensor scalar(double value, Precision precision = Precision::f64);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  Precision precision() const { return precision_; }

  std::span<const double> data() const { return data_; }
  // Write access for code that is building a fresh tensor.
  std::span<double> mutable_data() { return data_; }

  double item() const;
  double operator[](std::size_t flat) const { return data_[flat]; }
  double at(std::size_t row, std::size_t col) const;

  // Copy rounded to the requested precision.
  Tensor to(Precision precision) const;
  // Rounds in place when in f32 mode; used by kernels after writing results.
  void round_to_precision();

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
  Precision precision_ = Precision::f64;
};

Precision promote(Precision a, Precision b);

// Broadcast result shape: trailing axes aligned, a size-1 axis stretches.
Shape broadcast_shape(const Shape& a, const Shape& b);
// Sums `grad` over the axes that were broadcast to reach it from `target`.
Tensor reduce_to_shape(const Tensor& grad, const Shape& target);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor square(const Tensor& a);

// 2-D product; the flags multiply by the transposed operand without a copy.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
              bool transpose_b = false);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin,
             std::size_t end);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis);

// Numerically stable softmax; -inf entries act as masked logits.
Tensor softmax(const Tensor& logits, std::size_t axis);

// Row gather on a 2-D tensor: out[r] = a[indices[r]].
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices);
// Adjoint of gather_rows: rows are summed into a zero tensor of `rows` rows.
Tensor scatter_add_rows(const Tensor& src, std::span<const std::size_t> indices,
                        std::size_t rows);

// Normalizes each row of the trailing axis to zero mean, unit variance.
Tensor layer_norm(const Tensor& x, double eps);
Tensor gelu(const Tensor& x);
Tensor gelu_derivative(const Tensor& x);

double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& a);

}  // namespace tarflow
