#pragma once

#include <span>
#include <vector>

#include "pfnl/bank.h"
#include "pfnl/numerics.h"
#include "pfnl/params.h"
#include "pfnl/text_branch.h"

namespace pfnl {

struct HardNegative {
  ClassId label = 0;
  double score = 0.0;  // cosine to the mean support feature
};

// Mined negatives, sorted by descending score.
struct HardNegativeSet {
  std::vector<HardNegative> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

// Unweighted mean over all support vectors, all classes pooled.
Vector mean_support(std::span<const Vector> support);

// The k out-of-episode gallery classes most similar to `mean`; ties go to the
// lower class id. Throws MiningError when fewer than k candidates exist and
// DegenerateInputError when `mean` has zero norm (k > 0).
HardNegativeSet mine_hard_negatives(std::span<const double> mean, const ClassGallery& gallery,
                                    std::span<const ClassId> episode_classes, std::size_t k);

enum class NegativeForm {
  kAdapted,  // full text-branch adaptation with cross-modal coordination
  kPrompt,   // t_n + p_n only
};

// Adapted prototype z_n^- per mined negative, built from the text branch.
// `texts[i]` is the normalized base text embedding of negatives.entries[i].
std::vector<Var> adapt_negatives(std::span<const Var> texts, Var support,
                                 const TextBranchT<Var>& branch, const TextOptions& options,
                                 NegativeForm form = NegativeForm::kAdapted);

}  // namespace pfnl
