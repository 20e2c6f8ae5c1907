/**
 * @file autodiff.hpp
 * @brief Dense 2-D tensors and a reverse-mode tape.
 *
 * All values are row-major float64 matrices; vectors are 1 x n rows and
 * scalars are 1 x 1. Broadcasting is limited to adding a 1 x n row to every
 * row of an m x n matrix (bias addition).
 *
 * A Tape records each primitive applied to its Vars. backward() walks the
 * record once in reverse and accumulates gradients additively, so a Var used
 * several times receives the sum of its contributions. With tracking disabled
 * the tape only stores forward values.
 */
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace disdyn::ad {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  [[nodiscard]] std::size_t size() const noexcept { return rows * cols; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

[[nodiscard]] std::string to_string(const Shape& s);

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor row(std::vector<double> values);
  static Tensor scalar(double value) { return Tensor(1, 1, value); }

  [[nodiscard]] Shape shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rows() const noexcept { return shape_.rows; }
  [[nodiscard]] std::size_t cols() const noexcept { return shape_.cols; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_.cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_.cols + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  [[nodiscard]] std::span<double> data() noexcept { return data_; }
  [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
  [[nodiscard]] const std::vector<double>& vector() const noexcept { return data_; }
  [[nodiscard]] std::span<const double> row_span(std::size_t r) const {
    return {data_.data() + r * shape_.cols, shape_.cols};
  }

  /// Value of a 1 x 1 tensor.
  [[nodiscard]] double item() const;

  void fill(double v);
  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Named trainable tensor owned by a model.
struct Parameter {
  std::string name;
  Tensor value;
};

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  [[nodiscard]] const Tensor& value() const;
  [[nodiscard]] Shape shape() const { return value().shape(); }
  [[nodiscard]] std::size_t id() const noexcept { return id_; }
  [[nodiscard]] Tape* tape() const noexcept { return tape_; }
  [[nodiscard]] bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
  friend class Tape;
};

/// Backward rule for a user-defined node: add dL/d(input_i) into in_grads[i].
using CustomBackward = std::function<void(const Tensor& out_grad, std::span<Tensor> in_grads)>;

enum class Op : unsigned char {
  Leaf,
  Constant,
  MatMul,
  Add,
  AddRow,
  Sub,
  Mul,
  Scale,
  LeakyRelu,
  Sigmoid,
  Tanh,
  Exp,
  Log,
  Abs,
  Square,
  Sum,
  Mean,
  Concat,
  Slice,
  LayerNorm,
  Custom,
};

class Tape {
 public:
  explicit Tape(bool track_gradients = true) : tracking_(track_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  [[nodiscard]] bool tracking() const noexcept { return tracking_; }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  /// Non-differentiable value owned by the tape.
  Var constant(Tensor value);
  /// Non-differentiable view of an externally owned tensor (must outlive the tape).
  Var constant_view(const Tensor& value);
  /// Differentiable leaf owned by the tape.
  Var input(Tensor value);
  /// Differentiable leaf viewing an externally owned tensor (must outlive the tape).
  Var parameter(const Tensor& value);

  /// Records a node whose forward value was computed by the caller.
  Var custom(std::span<const Var> inputs, Tensor value, CustomBackward backward);

  /// Propagates d(loss)/d(node) to every node. Loss must be 1 x 1; a tape
  /// supports one backward pass.
  void backward(Var loss);

  /// Gradient of the last backward's loss with respect to v (zeros if v was not reached).
  [[nodiscard]] Tensor grad(Var v) const;

  // Used by the primitive implementations.
  Var record(Op op, std::initializer_list<Var> inputs, Tensor value, double scalar = 0.0,
             std::size_t aux0 = 0, std::size_t aux1 = 0, Tensor cache = {});
  Var record(Op op, std::span<const Var> inputs, Tensor value, double scalar = 0.0,
             std::size_t aux0 = 0, std::size_t aux1 = 0, Tensor cache = {});
  [[nodiscard]] const Tensor& value_of(std::size_t id) const;

 private:
  struct Node {
    Op op = Op::Constant;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    Tensor value;
    const Tensor* view = nullptr;
    double scalar = 0.0;
    std::size_t aux0 = 0;
    std::size_t aux1 = 0;
    Tensor cache;
    CustomBackward custom;
  };

  Var push(Node node);
  void check_owner(Var v) const;
  void propagate(std::size_t id, std::vector<Tensor>& grads) const;

  bool tracking_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// Primitives. Each checks shapes and throws ShapeError naming both shapes.

[[nodiscard]] Var matmul(Var a, Var b);
/// Same-shape sum, or b a 1 x n row added to every row of a.
[[nodiscard]] Var add(Var a, Var b);
[[nodiscard]] Var sub(Var a, Var b);
/// Elementwise product of equal shapes.
[[nodiscard]] Var mul(Var a, Var b);
[[nodiscard]] Var scale(Var a, double s);
[[nodiscard]] Var leaky_relu(Var a, double slope = 0.01);
[[nodiscard]] Var sigmoid(Var a);
[[nodiscard]] Var tanh(Var a);
[[nodiscard]] Var exp(Var a);
/// Natural log; non-positive entries raise DomainError.
[[nodiscard]] Var log(Var a);
/// |a| with subgradient 0 at 0.
[[nodiscard]] Var abs(Var a);
[[nodiscard]] Var square(Var a);
/// Sum of all entries, 1 x 1.
[[nodiscard]] Var sum(Var a);
/// Mean of all entries, 1 x 1.
[[nodiscard]] Var mean(Var a);
/// Column-wise concatenation of equal-row tensors.
[[nodiscard]] Var concat(std::span<const Var> parts);
[[nodiscard]] Var concat(std::initializer_list<Var> parts);
/// Columns [begin, end).
[[nodiscard]] Var slice(Var a, std::size_t begin, std::size_t end);
/// Row-wise normalization to zero mean / unit variance, then x_hat * gain + bias
/// with gain and bias 1 x n rows.
[[nodiscard]] Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }

/// A scalar-valued function of one tensor, built from tape primitives.
using ScalarFn = std::function<Var(Tape&, Var)>;

/**
 * @brief Compares reverse-mode gradients with central differences.
 *
 * Returns max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
 */
[[nodiscard]] double gradient_check(const ScalarFn& f, const Tensor& x, double h = 1e-6);

}  // namespace disdyn::ad
