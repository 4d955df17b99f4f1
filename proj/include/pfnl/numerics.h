#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace pfnl {

using Vector = std::vector<double>;

// Dense row-major matrix. Column vectors are n x 1 matrices.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix column(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool is_column() const { return cols_ == 1; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  Vector row(std::size_t r) const;
  Vector to_vector() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

std::string shape_string(const Matrix& m);

// Plain (untaped) helpers.
double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
// Throws DegenerateInputError when either input has zero norm.
double cosine(std::span<const double> a, std::span<const double> b);
Vector normalized(std::span<const double> a);
Vector softmax(std::span<const double> logits);
Vector layer_norm(std::span<const double> x, std::span<const double> gain,
                  std::span<const double> bias, double eps = 1e-5);
Vector affine(const Matrix& w, std::span<const double> x, std::span<const double> b);
double gelu(double x);
double gelu_derivative(double x);
bool all_finite(std::span<const double> values);

enum class Activation { kGelu, kRelu };

// Reverse-mode differentiation.
//
// A Tape records primitive applications in execution order; each node keeps
// its forward value and the ids of its inputs. backward() walks the nodes
// once in reverse and accumulates adjoints. Tapes are built per forward pass
// and are not thread safe.
class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Matrix& value() const;
  double scalar() const;
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

enum class OpKind {
  kLeaf,
  kAdd,
  kSub,
  kScale,
  kAddScalar,
  kMatMul,
  kTranspose,
  kCosine,
  kSoftmax,
  kLayerNorm,
  kGelu,
  kRelu,
  kCrossEntropy,
  kConcat,
  kSum,
  kSumSquares,
  kAddN,
};

class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Matrix> adjoints) : adjoints_(std::move(adjoints)) {}
  // Adjoint of the loss w.r.t. `v`; zeros of the right shape when `v` does
  // not influence the loss.
  const Matrix& of(Var v) const { return adjoints_.at(v.id()); }

 private:
  std::vector<Matrix> adjoints_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var constant(std::span<const double> column);
  Var parameter(Matrix value);

  const Matrix& value(Var v) const { return nodes_.at(v.id()).value; }
  bool is_parameter(Var v) const { return nodes_.at(v.id()).trainable; }
  std::size_t size() const { return nodes_.size(); }

  // `loss` must be a 1 x 1 node on this tape.
  Gradients backward(Var loss) const;

 private:
  struct Node {
    OpKind op = OpKind::kLeaf;
    std::vector<std::size_t> inputs;
    Matrix value;
    Matrix cache;         // op-specific: normalized input, softmax output
    double aux = 0.0;     // scale factor, eps, inverse stddev, norms product
    std::size_t index = 0;  // cross-entropy target
    bool trainable = false;
  };

  Var push(Node node);

  friend Var add(Var, Var);
  friend Var sub(Var, Var);
  friend Var scale(Var, double);
  friend Var add_scalar(Var, double);
  friend Var matmul(Var, Var);
  friend Var transpose(Var);
  friend Var cosine(Var, Var);
  friend Var softmax(Var);
  friend Var layer_norm(Var, Var, Var, double);
  friend Var gelu(Var);
  friend Var relu(Var);
  friend Var cross_entropy(Var, std::size_t);
  friend Var concat(std::span<const Var>);
  friend Var sum(Var);
  friend Var sum_squares(Var);
  friend Var add_n(std::span<const Var>);

  std::vector<Node> nodes_;
};

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
Var matmul(Var a, Var b);
Var transpose(Var a);
// Cosine similarity of two column vectors, as a 1 x 1 node.
Var cosine(Var a, Var b);
Var softmax(Var logits);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var gelu(Var x);
Var relu(Var x);
Var activate(Var x, Activation act);
// -log softmax(logits)[target].
Var cross_entropy(Var logits, std::size_t target);
// Stacks column vectors (including 1 x 1 scalars) into one column.
Var concat(std::span<const Var> parts);
Var sum(Var a);
Var sum_squares(Var a);
Var add_n(std::span<const Var> terms);
Var affine(Var w, Var x, Var b);
// W2 * act(W1 x + b1) + b2
Var mlp2(Var x, Var w1, Var b1, Var w2, Var b2, Activation act = Activation::kGelu);

}  // namespace pfnl
