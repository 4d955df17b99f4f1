#include "pfnl/text_branch.h"

#include <cmath>

#include "pfnl/error.h"

namespace pfnl {

PromptToken predict_prompt(Var text, const TextBranchT<Var>& branch, Activation act) {
  Var logits = mlp2(text, branch.mlp_w1, branch.mlp_b1, branch.mlp_w2, branch.mlp_b2, act);
  Var mix = softmax(logits);
  // p = sum_i mix_i s_i = S^T mix
  Var prompt = matmul(transpose(branch.styles), mix);
  return {prompt, mix};
}

Var enhance_text(Var text, Var prompt) { return add(text, prompt); }

Var attend(Var query, Var support, const AttentionLayerT<Var>& layer, Var* weights) {
  const Matrix& v = support.value();
  if (v.rows() == 0) throw DimensionError("cross attention over an empty support set");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(v.cols()));
  Var q = matmul(layer.query, query);                        // d x 1
  Var keys = matmul(support, transpose(layer.key));           // |S| x d
  Var values = matmul(support, transpose(layer.value));       // |S| x d
  Var w = softmax(scale(matmul(keys, q), inv_sqrt_d));        // |S| x 1
  if (weights != nullptr) *weights = w;
  return matmul(transpose(values), w);                        // d x 1
}

Var cross_modal_coordinate(Var enhanced, Var support,
                           std::span<const AttentionLayerT<Var>> layers, double norm_eps,
                           std::vector<Var>* weights_per_layer) {
  if (layers.empty()) throw ConfigError("cross-modal stack needs at least one layer");
  Var t = enhanced;
  for (const AttentionLayerT<Var>& layer : layers) {
    Var w;
    Var attended = attend(t, support, layer, &w);
    if (weights_per_layer != nullptr) weights_per_layer->push_back(w);
    t = layer_norm(add(t, matmul(layer.output, attended)), layer.norm_gain, layer.norm_bias,
                   norm_eps);
  }
  return t;
}

Var adapt_class_text(Var text, Var support, const TextBranchT<Var>& branch,
                     const TextOptions& options) {
  PromptToken token = predict_prompt(text, branch, options.activation);
  return cross_modal_coordinate(enhance_text(text, token.prompt), support, branch.layers,
                                options.norm_eps);
}

Vector adapt_class_text(std::span<const double> text, const Matrix& support,
                        const TextBranchT<Matrix>& branch, const TextOptions& options) {
  Tape tape;
  TextBranchT<Var> vars;
  vars.styles = tape.constant(branch.styles);
  vars.mlp_w1 = tape.constant(branch.mlp_w1);
  vars.mlp_b1 = tape.constant(branch.mlp_b1);
  vars.mlp_w2 = tape.constant(branch.mlp_w2);
  vars.mlp_b2 = tape.constant(branch.mlp_b2);
  for (const auto& l : branch.layers) {
    vars.layers.push_back({tape.constant(l.query), tape.constant(l.key),
                           tape.constant(l.value), tape.constant(l.output),
                           tape.constant(l.norm_gain), tape.constant(l.norm_bias)});
  }
  Var out = adapt_class_text(tape.constant(text), tape.constant(support), vars, options);
  return out.value().to_vector();
}

Vector adapt_class_text(ClassId label, const EmbeddingBank& textual, const Matrix& support,
                        const TextBranchT<Matrix>& branch, const TextOptions& options) {
  for (const BankRecord& r : textual.records) {
    if (r.label == label) {
      return adapt_class_text(normalized(r.features), support, branch, options);
    }
  }
  throw DataError("class " + std::to_string(label) + " not present in textual bank");
}

Matrix support_matrix(std::span<const Vector> features) {
  if (features.empty()) throw DimensionError("support set is empty");
  const std::size_t d = features.front().size();
  Matrix m(features.size(), d);
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].size() != d) throw DimensionError("support rows differ in dimension");
    const Vector u = normalized(features[i]);
    for (std::size_t j = 0; j < d; ++j) m(i, j) = u[j];
  }
  return m;
}

}  // namespace pfnl
