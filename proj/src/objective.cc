#include "pfnl/objective.h"

#include <algorithm>
#include <cmath>

#include "pfnl/error.h"
#include "pfnl/text_branch.h"
#include "pfnl/vision_branch.h"

namespace pfnl {

void Hyperparams::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(lambda_fuse)) throw ConfigError("lambda_fuse must lie in [0, 1]");
  if (!in_unit(lambda_infer)) throw ConfigError("lambda_infer must lie in [0, 1]");
  if (!(tau_temp > 0.0)) throw ConfigError("tau_temp must be positive");
  if (!(tau_margin > 0.0 && tau_margin <= 1.0)) throw ConfigError("tau_margin must lie in (0, 1]");
  if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
  if (negatives < 0) throw ConfigError("negatives must be >= 0");
  if (!(tau_calib > 0.0)) throw ConfigError("tau_calib must be positive");
  if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be positive");
}

PreparedEpisode prepare_episode(const Episode& episode, const ClassGallery& gallery,
                                std::size_t negatives) {
  PreparedEpisode p;
  p.classes = episode.classes;
  for (ClassId c : episode.classes) {
    if (c >= gallery.size()) throw DataError("episode class missing from gallery");
    p.class_text.push_back(gallery.prototypes[c]);
  }
  for (const LabeledVector& s : episode.support) {
    p.support.push_back(normalized(s.features));
    p.support_slot.push_back(episode.slot_of(s.label));
  }
  p.noise_mask = episode.noise_mask;
  p.support_matrix = support_matrix(p.support);
  p.support_mean = mean_support(p.support);
  for (const LabeledVector& q : episode.query) {
    p.query.push_back(normalized(q.features));
    p.query_slot.push_back(episode.slot_of(q.label));
  }
  p.negatives = mine_hard_negatives(p.support_mean, gallery, p.classes, negatives);
  for (const HardNegative& n : p.negatives.entries) {
    p.negative_text.push_back(gallery.prototypes[n.label]);
  }
  return p;
}

Var fuse_prototype(Var text, Var visual, Var adapted_text, Var adapted_visual, double lambda) {
  return add(scale(add(adapted_text, adapted_visual), lambda),
             scale(add(text, visual), 1.0 - lambda));
}

Vector fuse_prototype(std::span<const double> text, std::span<const double> visual,
                      std::span<const double> adapted_text,
                      std::span<const double> adapted_visual, double lambda) {
  const std::size_t d = text.size();
  if (visual.size() != d || adapted_text.size() != d || adapted_visual.size() != d) {
    throw DimensionError("fuse_prototype: dimension mismatch");
  }
  Vector out(d);
  for (std::size_t i = 0; i < d; ++i) {
    out[i] = lambda * (adapted_text[i] + adapted_visual[i]) +
             (1.0 - lambda) * (text[i] + visual[i]);
  }
  return out;
}

Var loss_pos(Var query, std::span<const Var> fused, std::size_t target, double tau) {
  std::vector<Var> logits;
  logits.reserve(fused.size());
  for (Var z : fused) logits.push_back(cosine(query, z));
  return cross_entropy(scale(concat(logits), 1.0 / tau), target);
}

Var loss_neg(Var query, std::span<const Var> negatives, double margin, HingeMode mode) {
  if (negatives.empty()) return query.tape().constant(Matrix(1, 1));
  std::vector<Var> hinges;
  hinges.reserve(negatives.size());
  for (Var z : negatives) {
    Var c = cosine(query, z);
    Var gap = mode == HingeMode::kProse ? add_scalar(c, -margin)
                                        : add_scalar(scale(c, -1.0), margin);
    hinges.push_back(relu(gap));
  }
  return scale(add_n(hinges), 1.0 / static_cast<double>(negatives.size()));
}

namespace {

bool in_reg_scope(RegSlot slot, RegScope scope) {
  switch (slot) {
    case RegSlot::kNone:
      return false;
    case RegSlot::kAttention:
      return true;
    case RegSlot::kStyle:
    case RegSlot::kPromptMlp:
      return scope == RegScope::kPromptAndAttention;
  }
  return false;
}

}  // namespace

Var attn_regularizer(const AdapterVars& params, double gamma, RegScope scope) {
  std::vector<Var> terms;
  for_each_slot(params, [&](const std::string&, ParamGroup, RegSlot slot, const Var& v) {
    if (in_reg_scope(slot, scope)) terms.push_back(sum_squares(v));
  });
  return scale(add_n(terms), gamma);
}

double attn_regularizer(const AdapterParams& params, double gamma, RegScope scope) {
  if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
  double total = 0.0;
  for_each_slot(params, [&](const std::string&, ParamGroup, RegSlot slot, const Matrix& m) {
    if (in_reg_scope(slot, scope)) total += dot(m.data(), m.data());
  });
  return gamma * total;
}

std::vector<Vector> visual_prototypes(const PreparedEpisode& episode,
                                      std::span<const double> weights) {
  if (!weights.empty() && weights.size() != episode.support.size()) {
    throw DimensionError("one weight per support sample required");
  }
  std::vector<Vector> out;
  for (std::size_t slot = 0; slot < episode.way(); ++slot) {
    std::vector<Vector> members;
    std::vector<double> w;
    for (std::size_t i = 0; i < episode.support.size(); ++i) {
      if (episode.support_slot[i] != slot) continue;
      members.push_back(episode.support[i]);
      w.push_back(weights.empty() ? 1.0 : weights[i]);
    }
    // Label noise can leave a slot with no labeled support; its class text
    // stands in for the visual prototype.
    if (members.empty()) {
      out.push_back(episode.class_text[slot]);
      continue;
    }
    double total = 0.0;
    for (double x : w) total += x;
    if (total == 0.0) std::fill(w.begin(), w.end(), 1.0);
    out.push_back(weighted_prototype(members, w));
  }
  return out;
}

namespace {

EpisodeGraph build_graph(const PreparedEpisode& episode, const AdapterParams& params,
                         const Hyperparams& hyper, std::span<const double> weights,
                         bool with_loss) {
  hyper.validate();
  if (params.vision.residual_tokens.size() != episode.way()) {
    throw DimensionError("model has " + std::to_string(params.vision.residual_tokens.size()) +
                         " residual slots, episode way is " +
                         std::to_string(episode.way()));
  }
  EpisodeGraph g;
  g.lambda_fuse = hyper.lambda_fuse;
  g.tape = std::make_unique<Tape>();
  Tape& tape = *g.tape;
  g.params = bind_params(tape, params);
  const TextOptions text_options{hyper.activation, hyper.norm_eps};

  Var support = tape.constant(episode.support_matrix);
  const std::vector<Vector> visual = visual_prototypes(episode, weights);
  for (std::size_t c = 0; c < episode.way(); ++c) {
    Var t = tape.constant(episode.class_text[c]);
    Var v = tape.constant(visual[c]);
    Var t_adapted = adapt_class_text(t, support, g.params.text, text_options);
    Var v_adapted = adapt_class_visual(v, g.params.vision.residual_tokens[c],
                                       g.params.vision.projection, g.params.vision.norm_gain,
                                       g.params.vision.norm_bias, hyper.norm_eps);
    g.base_text.push_back(t);
    g.base_visual.push_back(v);
    g.adapted_text.push_back(t_adapted);
    g.adapted_visual.push_back(v_adapted);
    g.fused.push_back(fuse_prototype(t, v, t_adapted, v_adapted, hyper.lambda_fuse));
  }
  if (!with_loss) return g;

  std::vector<Var> negative_text;
  for (const Vector& t : episode.negative_text) negative_text.push_back(tape.constant(t));
  g.negatives = adapt_negatives(negative_text, support, g.params.text, text_options,
                                hyper.negative_form);

  if (episode.query.empty()) throw DimensionError("episode has no queries");
  std::vector<Var> pos_terms;
  std::vector<Var> neg_terms;
  for (std::size_t i = 0; i < episode.query.size(); ++i) {
    Var q = tape.constant(episode.query[i]);
    pos_terms.push_back(loss_pos(q, g.fused, episode.query_slot[i], hyper.tau_temp));
    neg_terms.push_back(loss_neg(q, g.negatives, hyper.tau_margin, hyper.hinge));
  }
  const double inv_q = 1.0 / static_cast<double>(episode.query.size());
  g.loss_pos = scale(add_n(pos_terms), inv_q);
  g.loss_neg = scale(add_n(neg_terms), inv_q);
  g.reg = attn_regularizer(g.params, hyper.gamma, hyper.reg_scope);
  const Var parts[] = {g.loss_pos, g.loss_neg, g.reg};
  g.total = add_n(parts);
  return g;
}

}  // namespace

EpisodeGraph total_loss(const PreparedEpisode& episode, const AdapterParams& params,
                        const Hyperparams& hyper, std::span<const double> weights) {
  return build_graph(episode, params, hyper, weights, true);
}

FusedPrototypes build_prototypes(const PreparedEpisode& episode, const AdapterParams& params,
                                 const Hyperparams& hyper, std::span<const double> weights) {
  return build_graph(episode, params, hyper, weights, false).prototypes();
}

LossBreakdown EpisodeGraph::breakdown() const {
  LossBreakdown b;
  b.loss_pos = loss_pos.scalar();
  b.loss_neg = loss_neg.scalar();
  b.reg = reg.scalar();
  b.total = total.scalar();
  return b;
}

FusedPrototypes EpisodeGraph::prototypes() const {
  FusedPrototypes p;
  for (std::size_t c = 0; c < fused.size(); ++c) {
    p.base_text.push_back(base_text[c].value().to_vector());
    p.base_visual.push_back(base_visual[c].value().to_vector());
    p.adapted_text.push_back(adapted_text[c].value().to_vector());
    p.adapted_visual.push_back(adapted_visual[c].value().to_vector());
    p.fused.push_back(fused[c].value().to_vector());
    Vector st(p.base_text[c].size());
    Vector sv(st.size());
    for (std::size_t i = 0; i < st.size(); ++i) {
      st[i] = lambda_fuse * p.adapted_text[c][i] + (1.0 - lambda_fuse) * p.base_text[c][i];
      sv[i] = lambda_fuse * p.adapted_visual[c][i] + (1.0 - lambda_fuse) * p.base_visual[c][i];
    }
    p.scoring_text.push_back(std::move(st));
    p.scoring_visual.push_back(std::move(sv));
  }
  return p;
}

QueryScore score_query(std::span<const double> query, std::span<const Vector> text,
                       std::span<const Vector> visual, double lambda_infer, double tau_calib) {
  if (text.size() != visual.size() || text.empty()) {
    throw DimensionError("score_query: need one text and one visual prototype per class");
  }
  if (!(tau_calib > 0.0)) throw ConfigError("tau_calib must be positive");
  QueryScore out;
  out.scores.resize(text.size());
  for (std::size_t c = 0; c < text.size(); ++c) {
    out.scores[c] = lambda_infer * cosine(query, visual[c]) +
                    (1.0 - lambda_infer) * cosine(query, text[c]);
  }
  out.predicted = static_cast<std::size_t>(
      std::max_element(out.scores.begin(), out.scores.end()) - out.scores.begin());
  Vector scaled = out.scores;
  for (double& s : scaled) s /= tau_calib;
  out.probabilities = softmax(scaled);
  return out;
}

std::vector<std::size_t> predict(const PreparedEpisode& episode, const FusedPrototypes& protos,
                                 const Hyperparams& hyper) {
  std::vector<std::size_t> out;
  out.reserve(episode.query.size());
  for (const Vector& q : episode.query) {
    out.push_back(score_query(q, protos.scoring_text, protos.scoring_visual,
                              hyper.lambda_infer, hyper.tau_calib)
                      .predicted);
  }
  return out;
}

std::vector<std::size_t> predict_baseline(const PreparedEpisode& episode,
                                          const Hyperparams& hyper) {
  const std::vector<Vector> visual = visual_prototypes(episode, {});
  std::vector<std::size_t> out;
  out.reserve(episode.query.size());
  for (const Vector& q : episode.query) {
    out.push_back(
        score_query(q, episode.class_text, visual, hyper.lambda_infer, hyper.tau_calib)
            .predicted);
  }
  return out;
}

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> truth) {
  if (predicted.size() != truth.size()) throw DimensionError("accuracy: size mismatch");
  if (truth.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

}  // namespace pfnl
