#pragma once

#include <span>
#include <vector>

#include "pfnl/objective.h"

namespace pfnl {

struct InstanceWeights {
  std::vector<double> weights;       // one per support sample, in [0, 1]
  int rounds = 0;
  std::vector<std::size_t> fallback_slots;  // slots whose weights all clamped to 0
};

// 0.5 [cos(x, mean) + cos(x, fused)], clamped to [0, 1].
double instance_weight(std::span<const double> sample, std::span<const double> support_mean,
                       std::span<const double> fused);

// Fixed point between weights and fused prototypes: start from w = 1, then
// `rounds` times rebuild prototypes with the current weights and recompute
// every weight against its labeled class. The result is a constant for the
// loss graph.
InstanceWeights compute_weights(const PreparedEpisode& episode, const AdapterParams& params,
                                const Hyperparams& hyper, int rounds = 2);

}  // namespace pfnl
