#include "pfnl/vision_branch.h"

#include "pfnl/error.h"

namespace pfnl {

Vector weighted_prototype(std::span<const Vector> features, std::span<const double> weights) {
  if (features.empty()) throw DimensionError("weighted_prototype of an empty set");
  if (features.size() != weights.size()) {
    throw DimensionError("weighted_prototype: " + std::to_string(features.size()) +
                         " features, " + std::to_string(weights.size()) + " weights");
  }
  const std::size_t d = features.front().size();
  Vector out(d, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (weights[i] < 0.0) throw DataError("weighted_prototype: negative weight");
    if (features[i].size() != d) throw DimensionError("weighted_prototype: ragged features");
    total += weights[i];
    for (std::size_t j = 0; j < d; ++j) out[j] += weights[i] * features[i][j];
  }
  if (total == 0.0) throw DegenerateInputError("weighted_prototype: weights sum to zero");
  for (double& v : out) v /= total;
  return out;
}

Var adapt_class_visual(Var prototype, Var residual, Var projection, Var norm_gain,
                       Var norm_bias, double norm_eps) {
  Var shifted = add(prototype, residual);
  Var standardized = layer_norm(shifted, norm_gain, norm_bias, norm_eps);
  return matmul(projection, standardized);
}

Vector adapt_class_visual(std::span<const double> prototype, std::span<const double> residual,
                          const Matrix& projection, std::span<const double> norm_gain,
                          std::span<const double> norm_bias, double norm_eps) {
  Tape tape;
  Var out = adapt_class_visual(tape.constant(prototype), tape.constant(residual),
                               tape.constant(projection), tape.constant(norm_gain),
                               tape.constant(norm_bias), norm_eps);
  return out.value().to_vector();
}

}  // namespace pfnl
