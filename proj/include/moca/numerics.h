#pragma once

// Reverse-mode differentiation over dense real tensors.
//
// A Tape records primitive operations in creation order (which is a valid
// topological order); backward() walks it once in reverse and accumulates
// vector-Jacobian products. Parameters live outside the tape and receive
// their gradient when the tape is differentiated. Tensors of any rank are
// viewed as (rows x cols) with cols the last dimension.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "moca/common.h"

namespace moca::nn {

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) { return Tensor({rows, cols}, fill); }
  static Tensor scalar(double v) { return Tensor(std::vector<std::size_t>{}, std::vector<double>{v}); }
  static Tensor from(const Matrix& m);

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : size() / cols(); }
  bool empty() const noexcept { return data_.empty() && shape_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const;

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }

  Matrix to_matrix() const;
  void fill(double v);
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

/// A learnable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad = Tensor(value.shape()); }
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A node that never receives gradient.
  Var constant(Tensor value);
  /// A leaf bound to `p`; backward() adds this node's gradient into p.grad.
  Var parameter(Parameter& p);
  /// A leaf that records gradient on the tape only.
  Var leaf(Tensor value);

  /// Records an op node. `fn` (if the node needs grad) reads grad(self) and
  /// accumulates into its parents via grad_mut().
  Var record(Tensor value, std::initializer_list<Var> parents, Backward fn);
  Var record(Tensor value, const std::vector<Var>& parents, Backward fn);

  /// Differentiates a scalar node. Intermediate gradients are reset first,
  /// so running twice on the same tape is repeatable; parameter gradients
  /// accumulate.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  /// Gradient buffer of a node, allocated as zeros on first use.
  Tensor& grad_mut(std::size_t id);
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// --- primitives -----------------------------------------------------------
// Shapes must match exactly, except: add() accepts a 1 x cols bias row as the
// second operand, and mul() accepts a single-element second operand.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var matmul(Var a, Var b);
Var transpose(Var a);
Var slice_rows(Var a, std::size_t start, std::size_t count);
Var slice_cols(Var a, std::size_t start, std::size_t count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
/// out.row(i) = a.row(index[i]); repeated indices accumulate in backward.
Var gather_rows(Var a, std::vector<std::size_t> index);
Var sum(Var a);
Var mean(Var a);
Var gelu(Var a);
/// axis 1 normalizes each row, axis 0 each column (2-D view).
Var softmax(Var a, int axis = 1);
/// Row-wise normalization without affine terms.
Var layer_norm(Var a, double eps = 1e-5);
/// Row-wise normalization followed by gain * x + bias (both 1 x cols).
Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5);
/// Mean of squared differences over all elements.
Var mse(Var a, Var b);
/// Mean softmax cross-entropy of logits (n x K) against integer labels.
Var softmax_cross_entropy(Var logits, std::span<const int> labels);

// --- finite-difference oracle --------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t entries_checked = 0;
};

using LossFn = std::function<Var(Tape&)>;

/// Compares backward() gradients against central differences
/// (f(theta + h e) - f(theta - h e)) / 2h for every entry of every parameter,
/// using |a - n| / max(1e-8, |a| + |n|). Parameter gradients are zeroed
/// first and left holding the analytic gradient.
GradCheckResult finite_diff_check(const LossFn& fn, std::span<Parameter* const> params, double h = 1e-4);

}  // namespace moca::nn
