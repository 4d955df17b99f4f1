#include "pfnl/numerics.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "pfnl/error.h"

namespace pfnl {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("matrix data has " + std::to_string(data_.size()) +
                         " entries, expected " + std::to_string(rows * cols));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows)
    : rows_(rows.size()), cols_(rows.size() == 0 ? 0 : rows.begin()->size()) {
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw DimensionError("ragged matrix initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::column(std::span<const double> values) {
  return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

Vector Matrix::row(std::size_t r) const {
  auto first = data_.begin() + static_cast<std::ptrdiff_t>(r * cols_);
  return Vector(first, first + static_cast<std::ptrdiff_t>(cols_));
}

std::string shape_string(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

namespace {

void require_same_size(std::span<const double> a, std::span<const double> b,
                       const char* op) {
  if (a.size() != b.size()) {
    throw DimensionError(std::string(op) + ": length " + std::to_string(a.size()) +
                         " vs " + std::to_string(b.size()));
  }
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape " + shape_string(a) + " vs " +
                         shape_string(b));
  }
}

void require_column(const Matrix& a, const char* op) {
  if (!a.is_column() || a.rows() == 0) {
    throw DimensionError(std::string(op) + ": expected a non-empty column, got " +
                         shape_string(a));
  }
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace

double dot(std::span<const double> a, std::span<const double> b) {
  require_same_size(a, b, "dot");
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine(std::span<const double> a, std::span<const double> b) {
  require_same_size(a, b, "cosine");
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) {
    throw DegenerateInputError("cosine of a zero-norm vector");
  }
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

Vector normalized(std::span<const double> a) {
  const double n = norm(a);
  if (n == 0.0) throw DegenerateInputError("cannot normalize a zero-norm vector");
  Vector out(a.begin(), a.end());
  for (double& x : out) x /= n;
  return out;
}

Vector softmax(std::span<const double> logits) {
  if (logits.empty()) throw DimensionError("softmax of an empty vector");
  const double shift = *std::max_element(logits.begin(), logits.end());
  Vector out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - shift);
    total += out[i];
  }
  for (double& p : out) p /= total;
  return out;
}

Vector layer_norm(std::span<const double> x, std::span<const double> gain,
                  std::span<const double> bias, double eps) {
  require_same_size(x, gain, "layer_norm gain");
  require_same_size(x, bias, "layer_norm bias");
  if (x.empty()) throw DimensionError("layer_norm of an empty vector");
  const double n = static_cast<double>(x.size());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = gain[i] * (x[i] - mean) * inv + bias[i];
  }
  return out;
}

Vector affine(const Matrix& w, std::span<const double> x, std::span<const double> b) {
  if (w.cols() != x.size() || w.rows() != b.size()) {
    throw DimensionError("affine: W " + shape_string(w) + ", x " +
                         std::to_string(x.size()) + ", b " + std::to_string(b.size()));
  }
  Vector out(b.begin(), b.end());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t c = 0; c < w.cols(); ++c) out[r] += w(r, c) * x[c];
  }
  return out;
}

double gelu(double x) { return x * normal_cdf(x); }

double gelu_derivative(double x) { return normal_cdf(x) + x * normal_pdf(x); }

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(),
                     [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Tape

const Matrix& Var::value() const { return tape_->value(*this); }

double Var::scalar() const {
  const Matrix& m = value();
  if (m.size() != 1) throw DimensionError("scalar() on a " + shape_string(m) + " node");
  return m[0];
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::constant(std::span<const double> column) {
  return constant(Matrix::column(column));
}

Var Tape::parameter(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.trainable = true;
  return push(std::move(n));
}

namespace {

Tape& same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw Error("operands recorded on different tapes");
  return a.tape();
}

void accumulate(Matrix& into, const Matrix& from, double factor = 1.0) {
  auto dst = into.data();
  auto src = from.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * src[i];
}

Matrix matmul_values(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  }
  return out;
}

Matrix transpose_values(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  }
  return out;
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tape::Node n;
  n.op = OpKind::kAdd;
  n.inputs = {a.id(), b.id()};
  n.value = a.value();
  accumulate(n.value, b.value());
  return t.push(std::move(n));
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tape::Node n;
  n.op = OpKind::kSub;
  n.inputs = {a.id(), b.id()};
  n.value = a.value();
  accumulate(n.value, b.value(), -1.0);
  return t.push(std::move(n));
}

Var scale(Var a, double factor) {
  Tape::Node n;
  n.op = OpKind::kScale;
  n.inputs = {a.id()};
  n.aux = factor;
  n.value = a.value();
  for (double& v : n.value.data()) v *= factor;
  return a.tape().push(std::move(n));
}

Var add_scalar(Var a, double offset) {
  Tape::Node n;
  n.op = OpKind::kAddScalar;
  n.inputs = {a.id()};
  n.value = a.value();
  for (double& v : n.value.data()) v += offset;
  return a.tape().push(std::move(n));
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (a.value().cols() != b.value().rows()) {
    throw DimensionError("matmul: " + shape_string(a.value()) + " * " +
                         shape_string(b.value()));
  }
  Tape::Node n;
  n.op = OpKind::kMatMul;
  n.inputs = {a.id(), b.id()};
  n.value = matmul_values(a.value(), b.value());
  return t.push(std::move(n));
}

Var transpose(Var a) {
  Tape::Node n;
  n.op = OpKind::kTranspose;
  n.inputs = {a.id()};
  n.value = transpose_values(a.value());
  return a.tape().push(std::move(n));
}

Var cosine(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_column(a.value(), "cosine");
  require_same_shape(a.value(), b.value(), "cosine");
  const double na = norm(a.value().data());
  const double nb = norm(b.value().data());
  if (na == 0.0 || nb == 0.0) {
    throw DegenerateInputError("cosine of a zero-norm vector");
  }
  Tape::Node n;
  n.op = OpKind::kCosine;
  n.inputs = {a.id(), b.id()};
  n.value = Matrix(1, 1, dot(a.value().data(), b.value().data()) / (na * nb));
  // cache holds the two norms.
  n.cache = Matrix(2, 1, std::vector<double>{na, nb});
  return t.push(std::move(n));
}

Var softmax(Var logits) {
  require_column(logits.value(), "softmax");
  Tape::Node n;
  n.op = OpKind::kSoftmax;
  n.inputs = {logits.id()};
  n.value = Matrix::column(softmax(logits.value().data()));
  return logits.tape().push(std::move(n));
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = same_tape(x, gain);
  same_tape(x, bias);
  require_column(x.value(), "layer_norm");
  require_same_shape(x.value(), gain.value(), "layer_norm gain");
  require_same_shape(x.value(), bias.value(), "layer_norm bias");
  if (!(eps > 0.0)) throw ConfigError("layer_norm eps must be positive");
  const auto xs = x.value().data();
  const double dim = static_cast<double>(xs.size());
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / dim;
  double var = 0.0;
  for (double v : xs) var += (v - mean) * (v - mean);
  var /= dim;
  const double inv = 1.0 / std::sqrt(var + eps);

  Tape::Node n;
  n.op = OpKind::kLayerNorm;
  n.inputs = {x.id(), gain.id(), bias.id()};
  n.aux = inv;
  n.cache = Matrix(xs.size(), 1);
  n.value = Matrix(xs.size(), 1);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double xhat = (xs[i] - mean) * inv;
    n.cache[i] = xhat;
    n.value[i] = gain.value()[i] * xhat + bias.value()[i];
  }
  return t.push(std::move(n));
}

Var gelu(Var x) {
  Tape::Node n;
  n.op = OpKind::kGelu;
  n.inputs = {x.id()};
  n.value = x.value();
  for (double& v : n.value.data()) v = gelu(v);
  return x.tape().push(std::move(n));
}

Var relu(Var x) {
  Tape::Node n;
  n.op = OpKind::kRelu;
  n.inputs = {x.id()};
  n.value = x.value();
  for (double& v : n.value.data()) v = std::max(v, 0.0);
  return x.tape().push(std::move(n));
}

Var activate(Var x, Activation act) {
  return act == Activation::kGelu ? gelu(x) : relu(x);
}

Var cross_entropy(Var logits, std::size_t target) {
  require_column(logits.value(), "cross_entropy");
  const auto z = logits.value().data();
  if (target >= z.size()) throw DimensionError("cross_entropy target out of range");
  const double shift = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double v : z) total += std::exp(v - shift);
  Tape::Node n;
  n.op = OpKind::kCrossEntropy;
  n.inputs = {logits.id()};
  n.index = target;
  n.value = Matrix(1, 1, shift + std::log(total) - z[target]);
  n.cache = Matrix::column(softmax(z));
  return logits.tape().push(std::move(n));
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat of zero parts");
  Tape& t = parts.front().tape();
  Tape::Node n;
  n.op = OpKind::kConcat;
  std::vector<double> values;
  for (const Var& p : parts) {
    same_tape(parts.front(), p);
    require_column(p.value(), "concat");
    n.inputs.push_back(p.id());
    const auto d = p.value().data();
    values.insert(values.end(), d.begin(), d.end());
  }
  n.value = Matrix::column(values);
  return t.push(std::move(n));
}

Var sum(Var a) {
  const auto d = a.value().data();
  Tape::Node n;
  n.op = OpKind::kSum;
  n.inputs = {a.id()};
  n.value = Matrix(1, 1, std::accumulate(d.begin(), d.end(), 0.0));
  return a.tape().push(std::move(n));
}

Var sum_squares(Var a) {
  const auto d = a.value().data();
  Tape::Node n;
  n.op = OpKind::kSumSquares;
  n.inputs = {a.id()};
  n.value = Matrix(1, 1, dot(d, d));
  return a.tape().push(std::move(n));
}

Var add_n(std::span<const Var> terms) {
  if (terms.empty()) throw DimensionError("add_n of zero terms");
  Tape& t = terms.front().tape();
  Tape::Node n;
  n.op = OpKind::kAddN;
  n.value = Matrix(terms.front().value().rows(), terms.front().value().cols());
  for (const Var& term : terms) {
    same_tape(terms.front(), term);
    require_same_shape(n.value, term.value(), "add_n");
    n.inputs.push_back(term.id());
    accumulate(n.value, term.value());
  }
  return t.push(std::move(n));
}

Var affine(Var w, Var x, Var b) { return add(matmul(w, x), b); }

Var mlp2(Var x, Var w1, Var b1, Var w2, Var b2, Activation act) {
  return affine(w2, activate(affine(w1, x, b1), act), b2);
}

Gradients Tape::backward(Var loss) const {
  if (&loss.tape() != this) throw Error("backward: loss recorded on a different tape");
  if (value(loss).size() != 1) {
    throw DimensionError("backward: loss must be scalar, got " +
                         shape_string(value(loss)));
  }
  std::vector<Matrix> adj;
  adj.reserve(nodes_.size());
  for (const Node& n : nodes_) adj.emplace_back(n.value.rows(), n.value.cols());
  adj[loss.id()][0] = 1.0;

  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    const Matrix& g = adj[id];
    if (n.op == OpKind::kLeaf) continue;
    switch (n.op) {
      case OpKind::kLeaf:
        break;
      case OpKind::kAdd:
        accumulate(adj[n.inputs[0]], g);
        accumulate(adj[n.inputs[1]], g);
        break;
      case OpKind::kSub:
        accumulate(adj[n.inputs[0]], g);
        accumulate(adj[n.inputs[1]], g, -1.0);
        break;
      case OpKind::kScale:
        accumulate(adj[n.inputs[0]], g, n.aux);
        break;
      case OpKind::kAddScalar:
        accumulate(adj[n.inputs[0]], g);
        break;
      case OpKind::kMatMul: {
        const Matrix& a = nodes_[n.inputs[0]].value;
        const Matrix& b = nodes_[n.inputs[1]].value;
        accumulate(adj[n.inputs[0]], matmul_values(g, transpose_values(b)));
        accumulate(adj[n.inputs[1]], matmul_values(transpose_values(a), g));
        break;
      }
      case OpKind::kTranspose:
        accumulate(adj[n.inputs[0]], transpose_values(g));
        break;
      case OpKind::kCosine: {
        const Matrix& a = nodes_[n.inputs[0]].value;
        const Matrix& b = nodes_[n.inputs[1]].value;
        const double na = n.cache[0];
        const double nb = n.cache[1];
        const double c = n.value[0];
        const double up = g[0];
        Matrix& ga = adj[n.inputs[0]];
        for (std::size_t i = 0; i < a.size(); ++i) {
          ga[i] += up * (b[i] / (na * nb) - c * a[i] / (na * na));
        }
        Matrix& gb = adj[n.inputs[1]];
        for (std::size_t i = 0; i < b.size(); ++i) {
          gb[i] += up * (a[i] / (na * nb) - c * b[i] / (nb * nb));
        }
        break;
      }
      case OpKind::kSoftmax: {
        const Matrix& y = n.value;
        const double gy = dot(g.data(), y.data());
        Matrix& gx = adj[n.inputs[0]];
        for (std::size_t i = 0; i < y.size(); ++i) gx[i] += y[i] * (g[i] - gy);
        break;
      }
      case OpKind::kLayerNorm: {
        const Matrix& xhat = n.cache;
        const Matrix& gain = nodes_[n.inputs[1]].value;
        const std::size_t dim = xhat.size();
        Matrix& ggain = adj[n.inputs[1]];
        Matrix& gbias = adj[n.inputs[2]];
        double mean_g = 0.0;
        double mean_gx = 0.0;
        std::vector<double> gxhat(dim);
        for (std::size_t i = 0; i < dim; ++i) {
          ggain[i] += g[i] * xhat[i];
          gbias[i] += g[i];
          gxhat[i] = g[i] * gain[i];
          mean_g += gxhat[i];
          mean_gx += gxhat[i] * xhat[i];
        }
        mean_g /= static_cast<double>(dim);
        mean_gx /= static_cast<double>(dim);
        Matrix& gx = adj[n.inputs[0]];
        for (std::size_t i = 0; i < dim; ++i) {
          gx[i] += n.aux * (gxhat[i] - mean_g - xhat[i] * mean_gx);
        }
        break;
      }
      case OpKind::kGelu: {
        const Matrix& x = nodes_[n.inputs[0]].value;
        Matrix& gx = adj[n.inputs[0]];
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[i] * gelu_derivative(x[i]);
        break;
      }
      case OpKind::kRelu: {
        const Matrix& x = nodes_[n.inputs[0]].value;
        Matrix& gx = adj[n.inputs[0]];
        for (std::size_t i = 0; i < x.size(); ++i) {
          if (x[i] > 0.0) gx[i] += g[i];
        }
        break;
      }
      case OpKind::kCrossEntropy: {
        Matrix& gz = adj[n.inputs[0]];
        for (std::size_t i = 0; i < n.cache.size(); ++i) {
          gz[i] += g[0] * (n.cache[i] - (i == n.index ? 1.0 : 0.0));
        }
        break;
      }
      case OpKind::kConcat: {
        std::size_t offset = 0;
        for (std::size_t input : n.inputs) {
          Matrix& gi = adj[input];
          for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[offset + i];
          offset += gi.size();
        }
        break;
      }
      case OpKind::kSum: {
        for (double& v : adj[n.inputs[0]].data()) v += g[0];
        break;
      }
      case OpKind::kSumSquares: {
        const Matrix& a = nodes_[n.inputs[0]].value;
        accumulate(adj[n.inputs[0]], a, 2.0 * g[0]);
        break;
      }
      case OpKind::kAddN:
        for (std::size_t input : n.inputs) accumulate(adj[input], g);
        break;
    }
  }
  return Gradients(std::move(adj));
}

}  // namespace pfnl
