#include "disdyn/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

#include "disdyn/errors.hpp"

namespace disdyn::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

ConstMap as_matrix(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
MutMap as_matrix(Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

[[noreturn]] void shape_mismatch(const char* op, Shape a, Shape b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw Error("operation on an unbound Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  if (a.tape() != b.tape()) throw Error("operands recorded on different tapes");
  return tape_of(a);
}

template <class F>
Tensor map_values(const Tensor& in, F f) {
  Tensor out(in.rows(), in.cols());
  const auto src = in.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void ensure(Tensor& g, Shape s) {
  if (g.empty() && s.size() > 0) g = Tensor(s.rows, s.cols);
}

}  // namespace

std::string to_string(const Shape& s) {
  return "[" + std::to_string(s.rows) + " x " + std::to_string(s.cols) + "]";
}

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : shape_{rows, cols}, data_(rows * cols, fill) {}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : shape_{rows, cols}, data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     to_string(shape_));
  }
}

Tensor Tensor::row(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(1, n, std::move(values));
}

double Tensor::item() const {
  if (shape_.rows != 1 || shape_.cols != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape_));
  return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw Error("value() of an unbound Var");
  return tape_->value_of(id_);
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Tape::value_of(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.view != nullptr ? *n.view : n.value;
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owner(Var v) const {
  if (v.tape() != this) throw Error("Var belongs to a different tape");
}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = Op::Constant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::constant_view(const Tensor& value) {
  Node n;
  n.op = Op::Constant;
  n.view = &value;
  return push(std::move(n));
}

Var Tape::input(Tensor value) {
  Node n;
  n.op = Op::Leaf;
  n.requires_grad = tracking_;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::parameter(const Tensor& value) {
  Node n;
  n.op = Op::Leaf;
  n.requires_grad = tracking_;
  n.view = &value;
  return push(std::move(n));
}

Var Tape::record(Op op, std::initializer_list<Var> inputs, Tensor value, double scalar, std::size_t aux0,
                 std::size_t aux1, Tensor cache) {
  return record(op, std::span<const Var>(inputs.begin(), inputs.size()), std::move(value), scalar, aux0,
                aux1, std::move(cache));
}

Var Tape::record(Op op, std::span<const Var> inputs, Tensor value, double scalar, std::size_t aux0,
                 std::size_t aux1, Tensor cache) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  if (tracking_) {
    for (Var v : inputs) {
      check_owner(v);
      n.inputs.push_back(v.id());
      n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
    }
    if (n.requires_grad) {
      n.scalar = scalar;
      n.aux0 = aux0;
      n.aux1 = aux1;
      n.cache = std::move(cache);
    }
  }
  return push(std::move(n));
}

Var Tape::custom(std::span<const Var> inputs, Tensor value, CustomBackward backward) {
  Var v = record(Op::Custom, inputs, std::move(value));
  if (tracking_) nodes_[v.id()].custom = std::move(backward);
  return v;
}

void Tape::backward(Var loss) {
  check_owner(loss);
  if (!tracking_) throw Error("backward() on a tape with gradient tracking disabled");
  if (consumed_) throw Error("backward() already ran on this tape");
  const Shape s = loss.shape();
  if (s.rows != 1 || s.cols != 1) throw ShapeError("backward() needs a scalar loss, got " + to_string(s));
  consumed_ = true;

  grads_.assign(nodes_.size(), Tensor{});
  grads_[loss.id()] = Tensor::scalar(1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    if (grads_[i].empty() || !nodes_[i].requires_grad) continue;
    propagate(i, grads_);
  }
}

Tensor Tape::grad(Var v) const {
  check_owner(v);
  if (!consumed_) throw Error("grad() before backward()");
  const Tensor& g = grads_[v.id()];
  if (g.empty()) return Tensor(v.shape().rows, v.shape().cols);
  return g;
}

void Tape::propagate(std::size_t id, std::vector<Tensor>& grads) const {
  const Node& n = nodes_[id];
  const Tensor& g = grads[id];
  const Tensor& y = value_of(id);

  auto in_value = [&](std::size_t k) -> const Tensor& { return value_of(n.inputs[k]); };
  auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };
  auto in_grad = [&](std::size_t k) -> Tensor& {
    Tensor& t = grads[n.inputs[k]];
    ensure(t, in_value(k).shape());
    return t;
  };
  auto elementwise = [&](auto deriv) {
    if (!wants(0)) return;
    Tensor& ga = in_grad(0);
    const Tensor& a = in_value(0);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(a[i], y[i]);
  };

  switch (n.op) {
    case Op::Leaf:
    case Op::Constant: return;
    case Op::MatMul: {
      if (wants(0)) as_matrix(in_grad(0)).noalias() += as_matrix(g) * as_matrix(in_value(1)).transpose();
      if (wants(1)) as_matrix(in_grad(1)).noalias() += as_matrix(in_value(0)).transpose() * as_matrix(g);
      return;
    }
    case Op::Add: {
      if (wants(0)) as_matrix(in_grad(0)) += as_matrix(g);
      if (wants(1)) as_matrix(in_grad(1)) += as_matrix(g);
      return;
    }
    case Op::AddRow: {
      if (wants(0)) as_matrix(in_grad(0)) += as_matrix(g);
      if (wants(1)) as_matrix(in_grad(1)) += as_matrix(g).colwise().sum();
      return;
    }
    case Op::Sub: {
      if (wants(0)) as_matrix(in_grad(0)) += as_matrix(g);
      if (wants(1)) as_matrix(in_grad(1)) -= as_matrix(g);
      return;
    }
    case Op::Mul: {
      if (wants(0)) as_matrix(in_grad(0)).array() += as_matrix(g).array() * as_matrix(in_value(1)).array();
      if (wants(1)) as_matrix(in_grad(1)).array() += as_matrix(g).array() * as_matrix(in_value(0)).array();
      return;
    }
    case Op::Scale: {
      if (wants(0)) as_matrix(in_grad(0)) += n.scalar * as_matrix(g);
      return;
    }
    case Op::LeakyRelu: {
      const double slope = n.scalar;
      elementwise([slope](double a, double) { return a > 0.0 ? 1.0 : slope; });
      return;
    }
    case Op::Sigmoid: elementwise([](double, double s) { return s * (1.0 - s); }); return;
    case Op::Tanh: elementwise([](double, double t) { return 1.0 - t * t; }); return;
    case Op::Exp: elementwise([](double, double e) { return e; }); return;
    case Op::Log: elementwise([](double a, double) { return 1.0 / a; }); return;
    case Op::Abs:
      elementwise([](double a, double) { return a > 0.0 ? 1.0 : (a < 0.0 ? -1.0 : 0.0); });
      return;
    case Op::Square: elementwise([](double a, double) { return 2.0 * a; }); return;
    case Op::Sum: {
      if (wants(0)) {
        Tensor& ga = in_grad(0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
      }
      return;
    }
    case Op::Mean: {
      if (wants(0)) {
        Tensor& ga = in_grad(0);
        const double w = g[0] / static_cast<double>(ga.size());
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += w;
      }
      return;
    }
    case Op::Concat: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t w = in_value(k).cols();
        if (wants(k)) {
          Tensor& gk = in_grad(k);
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < w; ++c) gk(r, c) += g(r, offset + c);
          }
        }
        offset += w;
      }
      return;
    }
    case Op::Slice: {
      if (wants(0)) {
        Tensor& ga = in_grad(0);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < g.cols(); ++c) ga(r, n.aux0 + c) += g(r, c);
        }
      }
      return;
    }
    case Op::LayerNorm: {
      // cache holds x_hat [m x n] followed by one 1/sigma per row
      const std::size_t m = g.rows();
      const std::size_t cols = g.cols();
      const Tensor& gain = in_value(1);
      const double* xhat = n.cache.data().data();
      const double* inv_sigma = xhat + m * cols;
      if (wants(1) || wants(2)) {
        Tensor* ggain = wants(1) ? &in_grad(1) : nullptr;
        Tensor* gbias = wants(2) ? &in_grad(2) : nullptr;
        for (std::size_t r = 0; r < m; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            if (ggain) (*ggain)[c] += g(r, c) * xhat[r * cols + c];
            if (gbias) (*gbias)[c] += g(r, c);
          }
        }
      }
      if (wants(0)) {
        Tensor& gx = in_grad(0);
        const double nn = static_cast<double>(cols);
        for (std::size_t r = 0; r < m; ++r) {
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            const double d = g(r, c) * gain[c];
            sum_d += d;
            sum_dx += d * xhat[r * cols + c];
          }
          for (std::size_t c = 0; c < cols; ++c) {
            const double d = g(r, c) * gain[c];
            gx(r, c) += inv_sigma[r] / nn * (nn * d - sum_d - xhat[r * cols + c] * sum_dx);
          }
        }
      }
      return;
    }
    case Op::Custom: {
      std::vector<Tensor> in_grads;
      in_grads.reserve(n.inputs.size());
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        in_grads.emplace_back(in_value(k).rows(), in_value(k).cols());
      }
      n.custom(g, in_grads);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        if (wants(k)) as_matrix(in_grad(k)) += as_matrix(in_grads[k]);
      }
      return;
    }
  }
}

// ---------------------------------------------------------------------------
// primitives

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) shape_mismatch("matmul", av.shape(), bv.shape());
  Tensor out(av.rows(), bv.cols());
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  return t.record(Op::MatMul, {a, b}, std::move(out));
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() == bv.shape()) {
    Tensor out(av.rows(), av.cols());
    as_matrix(out) = as_matrix(av) + as_matrix(bv);
    return t.record(Op::Add, {a, b}, std::move(out));
  }
  if (bv.rows() == 1 && bv.cols() == av.cols()) {
    Tensor out(av.rows(), av.cols());
    as_matrix(out) = as_matrix(av).rowwise() + as_matrix(bv).row(0);
    return t.record(Op::AddRow, {a, b}, std::move(out));
  }
  shape_mismatch("add", av.shape(), bv.shape());
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) shape_mismatch("sub", av.shape(), bv.shape());
  Tensor out(av.rows(), av.cols());
  as_matrix(out) = as_matrix(av) - as_matrix(bv);
  return t.record(Op::Sub, {a, b}, std::move(out));
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) shape_mismatch("mul", av.shape(), bv.shape());
  Tensor out(av.rows(), av.cols());
  as_matrix(out).array() = as_matrix(av).array() * as_matrix(bv).array();
  return t.record(Op::Mul, {a, b}, std::move(out));
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  return t.record(Op::Scale, {a}, map_values(a.value(), [s](double x) { return s * x; }), s);
}

Var leaky_relu(Var a, double slope) {
  Tape& t = tape_of(a);
  return t.record(Op::LeakyRelu, {a},
                  map_values(a.value(), [slope](double x) { return x > 0.0 ? x : slope * x; }), slope);
}

Var sigmoid(Var a) {
  Tape& t = tape_of(a);
  return t.record(Op::Sigmoid, {a}, map_values(a.value(), stable_sigmoid));
}

Var tanh(Var a) {
  Tape& t = tape_of(a);
  return t.record(Op::Tanh, {a}, map_values(a.value(), [](double x) { return std::tanh(x); }));
}

Var exp(Var a) {
  Tape& t = tape_of(a);
  return t.record(Op::Exp, {a}, map_values(a.value(), [](double x) { return std::exp(x); }));
}

Var log(Var a) {
  Tape& t = tape_of(a);
  for (double x : a.value().data()) {
    if (!(x > 0.0)) throw DomainError("log of non-positive value " + std::to_string(x));
  }
  return t.record(Op::Log, {a}, map_values(a.value(), [](double x) { return std::log(x); }));
}

Var abs(Var a) {
  Tape& t = tape_of(a);
  return t.record(Op::Abs, {a}, map_values(a.value(), [](double x) { return std::abs(x); }));
}

Var square(Var a) {
  Tape& t = tape_of(a);
  return t.record(Op::Square, {a}, map_values(a.value(), [](double x) { return x * x; }));
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  double acc = 0.0;
  for (double x : a.value().data()) acc += x;
  return t.record(Op::Sum, {a}, Tensor::scalar(acc));
}

Var mean(Var a) {
  Tape& t = tape_of(a);
  const auto values = a.value().data();
  if (values.empty()) throw ShapeError("mean of an empty tensor");
  double acc = 0.0;
  for (double x : values) acc += x;
  return t.record(Op::Mean, {a}, Tensor::scalar(acc / static_cast<double>(values.size())));
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Tape& t = tape_of(parts[0]);
  const std::size_t rows = parts[0].value().rows();
  std::size_t cols = 0;
  for (Var p : parts) {
    if (p.tape() != &t) throw Error("operands recorded on different tapes");
    if (p.value().rows() != rows) shape_mismatch("concat", parts[0].shape(), p.shape());
    cols += p.value().cols();
  }
  Tensor out(rows, cols);
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data().data() + r * v.cols(), v.cols(), out.data().data() + r * cols + offset);
    }
    offset += v.cols();
  }
  return t.record(Op::Concat, parts, std::move(out));
}

Var concat(std::initializer_list<Var> parts) {
  return concat(std::span<const Var>(parts.begin(), parts.size()));
}

Var slice(Var a, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(a);
  const Tensor& v = a.value();
  if (begin > end || end > v.cols()) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for " +
                     to_string(v.shape()));
  }
  const std::size_t w = end - begin;
  Tensor out(v.rows(), w);
  for (std::size_t r = 0; r < v.rows(); ++r) {
    std::copy_n(v.data().data() + r * v.cols() + begin, w, out.data().data() + r * w);
  }
  return t.record(Op::Slice, {a}, std::move(out), 0.0, begin, end);
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = tape_of(x, gain);
  if (bias.tape() != &t) throw Error("operands recorded on different tapes");
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows();
  const std::size_t n = xv.cols();
  const Shape row{1, n};
  if (gain.shape() != row) shape_mismatch("layer_norm", xv.shape(), gain.shape());
  if (bias.shape() != row) shape_mismatch("layer_norm", xv.shape(), bias.shape());
  if (n == 0) throw ShapeError("layer_norm over zero columns");

  Tensor cache(1, m * n + m);
  double* xhat = cache.data().data();
  double* inv_sigma = xhat + m * n;
  Tensor out(m, n);
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < m; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += xv(r, c);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (xv(r, c) - mu) * (xv(r, c) - mu);
    var /= static_cast<double>(n);
    inv_sigma[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = (xv(r, c) - mu) * inv_sigma[r];
      out(r, c) = xhat[r * n + c] * gv[c] + bv[c];
    }
  }
  return t.record(Op::LayerNorm, {x, gain, bias}, std::move(out), eps, 0, 0, std::move(cache));
}

double gradient_check(const ScalarFn& f, const Tensor& x, double h) {
  Tape tape(true);
  Var xv = tape.input(x);
  Var y = f(tape, xv);
  tape.backward(y);
  const Tensor analytic = tape.grad(xv);

  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    Tape plus(false);
    const double fp = f(plus, plus.constant(probe)).value().item();
    probe[i] = orig - h;
    Tape minus(false);
    const double fm = f(minus, minus.constant(probe)).value().item();
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace disdyn::ad
