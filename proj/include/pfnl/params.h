#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pfnl/numerics.h"

namespace pfnl {

class Rng;

enum class ParamGroup { kText, kVision };

// Trainable state, templated on the slot type so the same layout serves
// plain values (Matrix) and tape handles (Var). Vectors are d x 1 columns.
template <class T>
struct AttentionLayerT {
  T query;
  T key;
  T value;
  T output;
  T norm_gain;
  T norm_bias;
};

template <class T>
struct TextBranchT {
  T styles;  // S x d, one style vector per row
  T mlp_w1;  // h x d
  T mlp_b1;  // h x 1
  T mlp_w2;  // S x h
  T mlp_b2;  // S x 1
  std::vector<AttentionLayerT<T>> layers;
};

template <class T>
struct VisionBranchT {
  std::vector<T> residual_tokens;  // one per episode class slot
  T projection;                    // d x d
  T norm_gain;
  T norm_bias;
};

template <class T>
struct AdapterT {
  TextBranchT<T> text;
  VisionBranchT<T> vision;
};

using AdapterParams = AdapterT<Matrix>;
using AdapterVars = AdapterT<Var>;

// Which slots count as prompt/attention parameters for the regularizer.
enum class RegSlot { kNone, kStyle, kPromptMlp, kAttention };

// Calls f(name, group, reg_slot, slot) for every trainable slot, in a fixed
// order shared by the optimizer, checkpoints and gradient checks.
template <class A, class F>
void for_each_slot(A& a, F&& f) {
  f(std::string("text.styles"), ParamGroup::kText, RegSlot::kStyle, a.text.styles);
  f(std::string("text.mlp.w1"), ParamGroup::kText, RegSlot::kPromptMlp, a.text.mlp_w1);
  f(std::string("text.mlp.b1"), ParamGroup::kText, RegSlot::kPromptMlp, a.text.mlp_b1);
  f(std::string("text.mlp.w2"), ParamGroup::kText, RegSlot::kPromptMlp, a.text.mlp_w2);
  f(std::string("text.mlp.b2"), ParamGroup::kText, RegSlot::kPromptMlp, a.text.mlp_b2);
  for (std::size_t l = 0; l < a.text.layers.size(); ++l) {
    auto& layer = a.text.layers[l];
    const std::string p = "text.attn." + std::to_string(l) + ".";
    f(p + "query", ParamGroup::kText, RegSlot::kAttention, layer.query);
    f(p + "key", ParamGroup::kText, RegSlot::kAttention, layer.key);
    f(p + "value", ParamGroup::kText, RegSlot::kAttention, layer.value);
    f(p + "output", ParamGroup::kText, RegSlot::kAttention, layer.output);
    f(p + "norm_gain", ParamGroup::kText, RegSlot::kNone, layer.norm_gain);
    f(p + "norm_bias", ParamGroup::kText, RegSlot::kNone, layer.norm_bias);
  }
  for (std::size_t s = 0; s < a.vision.residual_tokens.size(); ++s) {
    f("vision.residual." + std::to_string(s), ParamGroup::kVision, RegSlot::kNone,
      a.vision.residual_tokens[s]);
  }
  f(std::string("vision.projection"), ParamGroup::kVision, RegSlot::kNone,
    a.vision.projection);
  f(std::string("vision.norm_gain"), ParamGroup::kVision, RegSlot::kNone,
    a.vision.norm_gain);
  f(std::string("vision.norm_bias"), ParamGroup::kVision, RegSlot::kNone,
    a.vision.norm_bias);
}

// Architecture knobs fixed at initialization.
struct ArchConfig {
  int dim = 16;
  int styles = 8;
  int layers = 1;
  int hidden = 0;  // 0 means hidden width == dim
  int way = 5;     // number of residual-token slots
  double init_noise = 0.02;

  int hidden_width() const { return hidden > 0 ? hidden : dim; }
};

// Random initialization: identity + N(0, 0.02^2) for query/key/value and the
// visual projection, zero attention output projection, N(0, 0.02^2) styles,
// truncated-normal MLP weights with zero bias, unit gains, zero residuals.
AdapterParams init_params(const ArchConfig& arch, Rng& rng);

// Deterministic identity initialization: no noise anywhere and zero styles,
// so the prompt token vanishes and attention is gated off.
AdapterParams identity_params(const ArchConfig& arch);

// Records every slot as a trainable leaf.
AdapterVars bind_params(Tape& tape, const AdapterParams& params);

std::size_t parameter_count(const AdapterParams& params);

}  // namespace pfnl
