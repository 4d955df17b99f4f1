#include "pfnl/negative.h"

#include <algorithm>

#include "pfnl/error.h"

namespace pfnl {

Vector mean_support(std::span<const Vector> support) {
  if (support.empty()) throw DimensionError("mean of an empty support set");
  Vector mean(support.front().size(), 0.0);
  for (const Vector& x : support) {
    if (x.size() != mean.size()) throw DimensionError("support vectors differ in dimension");
    for (std::size_t j = 0; j < x.size(); ++j) mean[j] += x[j];
  }
  for (double& v : mean) v /= static_cast<double>(support.size());
  return mean;
}

HardNegativeSet mine_hard_negatives(std::span<const double> mean, const ClassGallery& gallery,
                                    std::span<const ClassId> episode_classes, std::size_t k) {
  HardNegativeSet out;
  if (k == 0) return out;
  std::vector<HardNegative> candidates;
  for (std::size_t j = 0; j < gallery.size(); ++j) {
    const auto id = static_cast<ClassId>(j);
    if (std::find(episode_classes.begin(), episode_classes.end(), id) !=
        episode_classes.end()) {
      continue;
    }
    candidates.push_back({id, cosine(mean, gallery.prototypes[j])});
  }
  if (candidates.size() < k) {
    throw MiningError("need " + std::to_string(k) + " hard negatives, only " +
                      std::to_string(candidates.size()) + " out-of-episode classes");
  }
  auto better = [](const HardNegative& a, const HardNegative& b) {
    return a.score != b.score ? a.score > b.score : a.label < b.label;
  };
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k),
                    candidates.end(), better);
  candidates.resize(k);
  out.entries = std::move(candidates);
  return out;
}

std::vector<Var> adapt_negatives(std::span<const Var> texts, Var support,
                                 const TextBranchT<Var>& branch, const TextOptions& options,
                                 NegativeForm form) {
  std::vector<Var> out;
  out.reserve(texts.size());
  for (Var t : texts) {
    if (form == NegativeForm::kAdapted) {
      out.push_back(adapt_class_text(t, support, branch, options));
    } else {
      out.push_back(enhance_text(t, predict_prompt(t, branch, options.activation).prompt));
    }
  }
  return out;
}

}  // namespace pfnl
