#include "pfnl/reweight.h"

#include <algorithm>

#include "pfnl/error.h"

namespace pfnl {

double instance_weight(std::span<const double> sample, std::span<const double> support_mean,
                       std::span<const double> fused) {
  const double raw = 0.5 * (cosine(sample, support_mean) + cosine(sample, fused));
  return std::clamp(raw, 0.0, 1.0);
}

InstanceWeights compute_weights(const PreparedEpisode& episode, const AdapterParams& params,
                                const Hyperparams& hyper, int rounds) {
  if (rounds < 1) throw ConfigError("reweighting needs at least one round");
  InstanceWeights out;
  out.weights.assign(episode.support.size(), 1.0);
  for (int round = 0; round < rounds; ++round) {
    const FusedPrototypes protos = build_prototypes(episode, params, hyper, out.weights);
    std::vector<double> next(episode.support.size());
    for (std::size_t i = 0; i < episode.support.size(); ++i) {
      next[i] = instance_weight(episode.support[i], episode.support_mean,
                                protos.fused[episode.support_slot[i]]);
    }
    out.fallback_slots.clear();
    for (std::size_t slot = 0; slot < episode.way(); ++slot) {
      bool any = false;
      for (std::size_t i = 0; i < next.size(); ++i) {
        if (episode.support_slot[i] == slot && next[i] > 0.0) any = true;
      }
      if (any) continue;
      out.fallback_slots.push_back(slot);
      for (std::size_t i = 0; i < next.size(); ++i) {
        if (episode.support_slot[i] == slot) next[i] = 1.0;
      }
    }
    out.weights = std::move(next);
    out.rounds = round + 1;
  }
  return out;
}

}  // namespace pfnl
