#include "tarflow/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "tarflow/errors.hpp"

namespace tarflow {
namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::size_t product(const Shape& shape, std::size_t begin, std::size_t end) {
  std::size_t n = 1;
  for (std::size_t i = begin; i < end; ++i) n *= shape[i];
  return n;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " +
                     std::to_string(rank) + ", got shape " +
                     to_string(t.shape()));
  }
}

void require_axis(const Tensor& t, std::size_t axis, const char* op) {
  if (axis >= t.rank()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + to_string(t.shape()));
  }
}

// Element strides of `shape` when viewed inside the broadcast shape `out`.
std::vector<std::size_t> broadcast_strides(const Shape& shape,
                                           const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t offset = out.size() - shape.size();
  for (std::size_t i = shape.size(); i-- > 0;) {
    strides[i + offset] = shape[i] == 1 ? 0 : stride;
    stride *= shape[i];
  }
  return strides;
}

template <class Op>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, Op op,
                        const char* name) {
  Shape out_shape;
  try {
    out_shape = broadcast_shape(a.shape(), b.shape());
  } catch (const ShapeError&) {
    throw ShapeError(std::string(name) + ": shapes " + to_string(a.shape()) +
                     " and " + to_string(b.shape()) + " do not broadcast");
  }
  Tensor out(out_shape, promote(a.precision(), b.precision()));
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  const std::size_t n = o.size();

  if (a.size() == n && b.size() == n) {
    for (std::size_t i = 0; i < n; ++i) o[i] = op(x[i], y[i]);
  } else if (b.size() == 1 && a.size() == n) {
    for (std::size_t i = 0; i < n; ++i) o[i] = op(x[i], y[0]);
  } else if (a.size() == 1 && b.size() == n) {
    for (std::size_t i = 0; i < n; ++i) o[i] = op(x[0], y[i]);
  } else if (a.size() == n &&
             std::equal(b.shape().rbegin(), b.shape().rend(),
                        out_shape.rbegin())) {
    // b is a trailing block repeated over the leading axes.
    const std::size_t m = b.size();
    for (std::size_t i = 0; i < n; ++i) o[i] = op(x[i], y[i % m]);
  } else {
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    std::vector<std::size_t> index(out_shape.size(), 0);
    std::size_t ia = 0;
    std::size_t ib = 0;
    for (std::size_t i = 0; i < n; ++i) {
      o[i] = op(x[ia], y[ib]);
      for (std::size_t ax = out_shape.size(); ax-- > 0;) {
        ++index[ax];
        ia += sa[ax];
        ib += sb[ax];
        if (index[ax] < out_shape[ax]) break;
        ia -= sa[ax] * out_shape[ax];
        ib -= sb[ax] * out_shape[ax];
        index[ax] = 0;
      }
    }
  }
  out.round_to_precision();
  return out;
}

template <class Op>
Tensor unary(const Tensor& a, Op op) {
  Tensor out(a.shape(), a.precision());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = op(x[i]);
  out.round_to_precision();
  return out;
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return product(shape, 0, shape.size());
}

Tensor::Tensor() : data_(1, 0.0) {}

Tensor::Tensor(Shape shape, Precision precision)
    : shape_(std::move(shape)), precision_(precision) {
  for (std::size_t d : shape_) {
    if (d == 0) {
      throw ShapeError("tensor dimensions must be positive, got " +
                       to_string(shape_));
    }
  }
  data_.assign(shape_numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data, Precision precision)
    : shape_(std::move(shape)), data_(std::move(data)), precision_(precision) {
  for (std::size_t d : shape_) {
    if (d == 0) {
      throw ShapeError("tensor dimensions must be positive, got " +
                       to_string(shape_));
    }
  }
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("shape " + to_string(shape_) + " needs " +
                     std::to_string(shape_numel(shape_)) + " values, got " +
                     std::to_string(data_.size()));
  }
  round_to_precision();
}

Tensor Tensor::zeros(Shape shape, Precision precision) {
  return Tensor(std::move(shape), precision);
}

Tensor Tensor::ones(Shape shape, Precision precision) {
  return full(std::move(shape), 1.0, precision);
}

Tensor Tensor::full(Shape shape, double value, Precision precision) {
  Tensor t(std::move(shape), precision);
  std::fill(t.data_.begin(), t.data_.end(), value);
  t.round_to_precision();
  return t;
}

Tensor Tensor::scalar(double value, Precision precision) {
  return Tensor(Shape{}, {value}, precision);
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(data));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     to_string(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() needs a single-element tensor, got " +
                     to_string(shape_));
  }
  return data_[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  require_rank(*this, 2, "at");
  return data_[row * shape_[1] + col];
}

Tensor Tensor::to(Precision precision) const {
  Tensor t = *this;
  t.precision_ = precision;
  t.round_to_precision();
  return t;
}

void Tensor::round_to_precision() {
  if (precision_ != Precision::f32) return;
  for (double& v : data_) v = static_cast<double>(static_cast<float>(v));
}

Precision promote(Precision a, Precision b) {
  return (a == Precision::f32 || b == Precision::f32) ? Precision::f32
                                                      : Precision::f64;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) +
                       " do not broadcast");
    }
    out[rank - 1 - i] = std::max(da, db);
  }
  return out;
}

Tensor reduce_to_shape(const Tensor& grad, const Shape& target) {
  if (grad.shape() == target) return grad;
  if (broadcast_shape(grad.shape(), target) != grad.shape()) {
    throw ShapeError("cannot reduce " + to_string(grad.shape()) + " to " +
                     to_string(target));
  }
  Tensor out(target, grad.precision());
  auto o = out.mutable_data();
  auto g = grad.data();
  const std::size_t m = out.size();
  if (std::equal(target.rbegin(), target.rend(), grad.shape().rbegin())) {
    for (std::size_t i = 0; i < g.size(); ++i) o[i % m] += g[i];
  } else {
    const Shape& gs = grad.shape();
    const auto st = broadcast_strides(target, gs);
    std::vector<std::size_t> index(gs.size(), 0);
    std::size_t it = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      o[it] += g[i];
      for (std::size_t ax = gs.size(); ax-- > 0;) {
        ++index[ax];
        it += st[ax];
        if (index[ax] < gs[ax]) break;
        it -= st[ax] * gs[ax];
        index[ax] = 0;
      }
    }
  }
  out.round_to_precision();
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return broadcast_binary(a, b, [](double x, double y) { return x + y; },
                          "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return broadcast_binary(a, b, [](double x, double y) { return x - y; },
                          "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return broadcast_binary(a, b, [](double x, double y) { return x * y; },
                          "mul");
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data()) {
    if (v == 0.0) throw DomainError("div: division by zero");
  }
  return broadcast_binary(a, b, [](double x, double y) { return x / y; },
                          "div");
}

Tensor neg(const Tensor& a) {
  return unary(a, [](double x) { return -x; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) {
      throw DomainError("log: argument " + std::to_string(v) +
                        " is not positive");
    }
  }
  return unary(a, [](double x) { return std::log(x); });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return x * factor; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a,
              bool transpose_b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = transpose_a ? a.dim(1) : a.dim(0);
  const std::size_t k = transpose_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw ShapeError("matmul: shapes " + to_string(a.shape()) +
                     (transpose_a ? "^T" : "") + " and " +
                     to_string(b.shape()) + (transpose_b ? "^T" : "") +
                     " are not aligned");
  }
  Tensor out(Shape{m, n}, promote(a.precision(), b.precision()));
  Eigen::Map<const RowMatrix> A(a.data().data(), a.dim(0), a.dim(1));
  Eigen::Map<const RowMatrix> B(b.data().data(), b.dim(0), b.dim(1));
  Eigen::Map<RowMatrix> R(out.mutable_data().data(), m, n);
  if (!transpose_a && !transpose_b) {
    R.noalias() = A * B;
  } else if (transpose_a && !transpose_b) {
    R.noalias() = A.transpose() * B;
  } else if (!transpose_a && transpose_b) {
    R.noalias() = A * B.transpose();
  } else {
    R.noalias() = A.transpose() * B.transpose();
  }
  out.round_to_precision();
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0);
  const std::size_t c = a.dim(1);
  Tensor out(Shape{c, r}, a.precision());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) o[j * r + i] = x[i * c + j];
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " +
                     to_string(shape));
  }
  std::vector<double> data(a.data().begin(), a.data().end());
  return Tensor(std::move(shape), std::move(data), a.precision());
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Tensor& first = parts.front();
  require_axis(first, axis, "concat");
  Shape out_shape = first.shape();
  out_shape[axis] = 0;
  Precision precision = first.precision();
  for (const Tensor& p : parts) {
    bool ok = p.rank() == first.rank();
    for (std::size_t i = 0; ok && i < p.rank(); ++i) {
      ok = i == axis || p.shape()[i] == first.shape()[i];
    }
    if (!ok) {
      throw ShapeError("concat: shapes " + to_string(first.shape()) + " and " +
                       to_string(p.shape()) + " differ off axis " +
                       std::to_string(axis));
    }
    out_shape[axis] += p.shape()[axis];
    precision = promote(precision, p.precision());
  }
  const std::size_t outer = product(out_shape, 0, axis);
  const std::size_t inner = product(out_shape, axis + 1, out_shape.size());
  Tensor out(out_shape, precision);
  auto o = out.mutable_data();
  std::size_t pos = 0;
  for (std::size_t i = 0; i < outer; ++i) {
    for (const Tensor& p : parts) {
      const std::size_t chunk = p.shape()[axis] * inner;
      auto src = p.data().subspan(i * chunk, chunk);
      std::copy(src.begin(), src.end(), o.begin() + pos);
      pos += chunk;
    }
  }
  out.round_to_precision();
  return out;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin,
             std::size_t end) {
  require_axis(a, axis, "slice");
  if (begin >= end || end > a.shape()[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") invalid for axis " +
                     std::to_string(axis) + " of " + to_string(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t outer = product(a.shape(), 0, axis);
  const std::size_t inner = product(a.shape(), axis + 1, a.rank());
  const std::size_t len = a.shape()[axis];
  Tensor out(out_shape, a.precision());
  auto o = out.mutable_data();
  auto x = a.data();
  std::size_t pos = 0;
  for (std::size_t i = 0; i < outer; ++i) {
    const std::size_t from = (i * len + begin) * inner;
    const std::size_t count = (end - begin) * inner;
    std::copy(x.begin() + from, x.begin() + from + count, o.begin() + pos);
    pos += count;
  }
  return out;
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::scalar(s, a.precision());
}

Tensor sum(const Tensor& a, std::size_t axis) {
  require_axis(a, axis, "sum");
  const std::size_t outer = product(a.shape(), 0, axis);
  const std::size_t len = a.shape()[axis];
  const std::size_t inner = product(a.shape(), axis + 1, a.rank());
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(out_shape, a.precision());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < outer; ++i) {
    for (std::size_t k = 0; k < len; ++k) {
      const double* row = x.data() + (i * len + k) * inner;
      double* dst = o.data() + i * inner;
      for (std::size_t j = 0; j < inner; ++j) dst[j] += row[j];
    }
  }
  out.round_to_precision();
  return out;
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor mean(const Tensor& a, std::size_t axis) {
  require_axis(a, axis, "mean");
  return scale(sum(a, axis), 1.0 / static_cast<double>(a.shape()[axis]));
}

Tensor softmax(const Tensor& logits, std::size_t axis) {
  require_axis(logits, axis, "softmax");
  const std::size_t outer = product(logits.shape(), 0, axis);
  const std::size_t len = logits.shape()[axis];
  const std::size_t inner = product(logits.shape(), axis + 1, logits.rank());
  Tensor out(logits.shape(), logits.precision());
  auto o = out.mutable_data();
  auto x = logits.data();
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < outer; ++i) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = i * len * inner + j;
      double peak = kNegInf;
      for (std::size_t k = 0; k < len; ++k) {
        const double v = x[base + k * inner];
        if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
          throw DomainError("softmax: non-finite logit");
        }
        peak = std::max(peak, v);
      }
      if (peak == kNegInf) {
        throw DegenerateMaskError("softmax: every logit in a row is -inf");
      }
      double total = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(x[base + k * inner] - peak);
        o[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < len; ++k) o[base + k * inner] /= total;
    }
  }
  out.round_to_precision();
  return out;
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices) {
  require_rank(a, 2, "gather_rows");
  const std::size_t cols = a.dim(1);
  Tensor out(Shape{indices.size(), cols}, a.precision());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= a.dim(0)) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[r]) +
                       " out of range for " + to_string(a.shape()));
    }
    std::copy_n(x.begin() + indices[r] * cols, cols, o.begin() + r * cols);
  }
  return out;
}

Tensor scatter_add_rows(const Tensor& src, std::span<const std::size_t> indices,
                        std::size_t rows) {
  require_rank(src, 2, "scatter_add_rows");
  if (src.dim(0) != indices.size()) {
    throw ShapeError("scatter_add_rows: " + std::to_string(indices.size()) +
                     " indices for source " + to_string(src.shape()));
  }
  const std::size_t cols = src.dim(1);
  Tensor out(Shape{rows, cols}, src.precision());
  auto o = out.mutable_data();
  auto x = src.data();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    double* dst = o.data() + indices[r] * cols;
    const double* row = x.data() + r * cols;
    for (std::size_t j = 0; j < cols; ++j) dst[j] += row[j];
  }
  out.round_to_precision();
  return out;
}

Tensor layer_norm(const Tensor& x, double eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  Tensor out(x.shape(), x.precision());
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * cols;
    double mu = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mu += row[j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + eps);
    double* dst = o.data() + r * cols;
    for (std::size_t j = 0; j < cols; ++j) dst[j] = (row[j] - mu) * inv;
  }
  out.round_to_precision();
  return out;
}

Tensor gelu(const Tensor& x) {
  return unary(x, [](double v) {
    return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  });
}

Tensor gelu_derivative(const Tensor& x) {
  return unary(x, [](double v) {
    const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
    return cdf + v * pdf;
  });
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

bool all_finite(const Tensor& a) {
  return std::all_of(a.data().begin(), a.data().end(),
                     [](double v) { return std::isfinite(v); });
}

}  // namespace tarflow
