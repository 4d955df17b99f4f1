#pragma once

#include <span>
#include <vector>

#include "pfnl/bank.h"
#include "pfnl/numerics.h"
#include "pfnl/params.h"

namespace pfnl {

struct TextOptions {
  Activation activation = Activation::kGelu;
  double norm_eps = 1e-5;
};

struct PromptToken {
  Var prompt;  // p_c, d x 1
  Var mix;     // style mixing weights on the simplex, S x 1
};

// Mixes the style bank with softmax(mlp(t)) weights.
PromptToken predict_prompt(Var text, const TextBranchT<Var>& branch,
                           Activation act = Activation::kGelu);

Var enhance_text(Var text, Var prompt);

// Single-head scaled dot-product attention of one query column over the rows
// of `support` (|S| x d). Returns the attended value (before the output
// projection); `weights`, when given, receives the attention distribution.
Var attend(Var query, Var support, const AttentionLayerT<Var>& layer,
           Var* weights = nullptr);

// Stacked cross-attention, each layer applying t <- LN(t + W_o attend(t)).
// `weights_per_layer`, when given, collects each layer's attention weights.
Var cross_modal_coordinate(Var enhanced, Var support,
                           std::span<const AttentionLayerT<Var>> layers,
                           double norm_eps = 1e-5,
                           std::vector<Var>* weights_per_layer = nullptr);

// prompt -> residual add -> cross-modal coordination.
Var adapt_class_text(Var text, Var support, const TextBranchT<Var>& branch,
                     const TextOptions& options = {});

// Untaped variant: `text` should already be L2-normalized.
Vector adapt_class_text(std::span<const double> text, const Matrix& support,
                        const TextBranchT<Matrix>& branch, const TextOptions& options = {});

// Looks up class `label` in the textual bank, normalizes it, and adapts it.
Vector adapt_class_text(ClassId label, const EmbeddingBank& textual, const Matrix& support,
                        const TextBranchT<Matrix>& branch, const TextOptions& options = {});

// Stacks unit-normalized support features into an |S| x d matrix.
Matrix support_matrix(std::span<const Vector> features);

}  // namespace pfnl
