#pragma once

#include <span>

#include "pfnl/numerics.h"

namespace pfnl {

// Weighted mean of `features`. Throws DegenerateInputError when the weights
// sum to zero and DataError on negative weights.
Vector weighted_prototype(std::span<const Vector> features, std::span<const double> weights);

// W_v * LayerNorm(v + r).
Var adapt_class_visual(Var prototype, Var residual, Var projection, Var norm_gain,
                       Var norm_bias, double norm_eps = 1e-5);

Vector adapt_class_visual(std::span<const double> prototype, std::span<const double> residual,
                          const Matrix& projection, std::span<const double> norm_gain,
                          std::span<const double> norm_bias, double norm_eps = 1e-5);

}  // namespace pfnl
