#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pfnl/bank.h"
#include "pfnl/negative.h"
#include "pfnl/numerics.h"
#include "pfnl/params.h"

namespace pfnl {

enum class HingeMode {
  kProse,  // max(0, cos - margin): repels queries from negatives
  kPaper,  // max(0, margin - cos): penalizes negatives that are too dissimilar
};

enum class RegScope {
  kPromptAndAttention,  // styles + prompt MLP + cross-attention projections
  kAttentionOnly,
};

struct Hyperparams {
  double lambda_fuse = 0.5;
  double lambda_infer = 0.5;
  double tau_temp = 0.07;
  double tau_margin = 0.5;
  double gamma = 1e-4;
  int negatives = 3;
  double tau_calib = 1.0;
  HingeMode hinge = HingeMode::kProse;
  RegScope reg_scope = RegScope::kPromptAndAttention;
  NegativeForm negative_form = NegativeForm::kAdapted;
  Activation activation = Activation::kGelu;
  double norm_eps = 1e-5;

  // Throws ConfigError when a field is out of range.
  void validate() const;
};

// Episode data in the form the objective consumes: unit-normalized features,
// labels as slot indices, and hard negatives mined from base prototypes.
struct PreparedEpisode {
  std::vector<ClassId> classes;
  std::vector<Vector> class_text;
  std::vector<Vector> support;
  std::vector<std::size_t> support_slot;  // observed (possibly noisy) labels
  std::vector<bool> noise_mask;
  Matrix support_matrix;
  Vector support_mean;
  std::vector<Vector> query;
  std::vector<std::size_t> query_slot;
  HardNegativeSet negatives;
  std::vector<Vector> negative_text;

  std::size_t way() const { return classes.size(); }
};

// Normalizes features and mines `negatives` hard negatives (none when 0).
PreparedEpisode prepare_episode(const Episode& episode, const ClassGallery& gallery,
                                std::size_t negatives);

// Per-slot prototypes as plain values.
struct FusedPrototypes {
  std::vector<Vector> base_text;
  std::vector<Vector> base_visual;
  std::vector<Vector> adapted_text;
  std::vector<Vector> adapted_visual;
  std::vector<Vector> fused;
  // lambda_fuse blends of base and adapted, one per modality; fused is
  // exactly scoring_text + scoring_visual.
  std::vector<Vector> scoring_text;
  std::vector<Vector> scoring_visual;
};

struct LossBreakdown {
  double loss_pos = 0.0;
  double loss_neg = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

// lambda (t~ + v~) + (1 - lambda)(t + v)
Var fuse_prototype(Var text, Var visual, Var adapted_text, Var adapted_visual, double lambda);
Vector fuse_prototype(std::span<const double> text, std::span<const double> visual,
                      std::span<const double> adapted_text,
                      std::span<const double> adapted_visual, double lambda);

// -log softmax(cos(q, z_j) / tau)[target]
Var loss_pos(Var query, std::span<const Var> fused, std::size_t target, double tau);

// Mean hinge over negatives; a zero constant when there are none.
Var loss_neg(Var query, std::span<const Var> negatives, double margin, HingeMode mode);

Var attn_regularizer(const AdapterVars& params, double gamma, RegScope scope);
double attn_regularizer(const AdapterParams& params, double gamma, RegScope scope);

// The complete differentiable graph for one episode. `weights` are per
// support sample and enter as constants.
struct EpisodeGraph {
  std::unique_ptr<Tape> tape;
  AdapterVars params;
  std::vector<Var> base_text;
  std::vector<Var> base_visual;
  std::vector<Var> adapted_text;
  std::vector<Var> adapted_visual;
  std::vector<Var> fused;
  std::vector<Var> negatives;
  Var loss_pos;
  Var loss_neg;
  Var reg;
  Var total;
  double lambda_fuse = 0.5;

  LossBreakdown breakdown() const;
  FusedPrototypes prototypes() const;
};

// Builds base visual prototypes from `weights` (uniform when empty); weights
// of a slot that sum to zero fall back to uniform.
std::vector<Vector> visual_prototypes(const PreparedEpisode& episode,
                                      std::span<const double> weights);

EpisodeGraph total_loss(const PreparedEpisode& episode, const AdapterParams& params,
                        const Hyperparams& hyper, std::span<const double> weights = {});

// Prototypes only (no loss terms); used by scoring and reweighting.
FusedPrototypes build_prototypes(const PreparedEpisode& episode, const AdapterParams& params,
                                 const Hyperparams& hyper,
                                 std::span<const double> weights = {});

struct QueryScore {
  Vector scores;
  std::size_t predicted = 0;
  Vector probabilities;
};

// s_c = lambda cos(q, v_c) + (1 - lambda) cos(q, t_c); argmax with ties to
// the lowest slot; probabilities = softmax(s / tau_calib).
QueryScore score_query(std::span<const double> query, std::span<const Vector> text,
                       std::span<const Vector> visual, double lambda_infer, double tau_calib);

// Slot predictions of the adapted model for every query.
std::vector<std::size_t> predict(const PreparedEpisode& episode, const FusedPrototypes& protos,
                                 const Hyperparams& hyper);

// Zero-shot cosine baseline: the same scoring rule over the frozen base
// prototypes (normalized class text, unweighted support mean).
std::vector<std::size_t> predict_baseline(const PreparedEpisode& episode,
                                          const Hyperparams& hyper);

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> truth);

}  // namespace pfnl
