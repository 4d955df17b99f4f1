#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pfnl/bank.h"
#include "pfnl/config.h"
#include "pfnl/objective.h"
#include "pfnl/params.h"

namespace pfnl {

struct AdamWGroup {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;

  bool operator==(const AdamWGroup&) const = default;
};

// Moments are stored per slot in for_each_slot order.
struct AdamWState {
  std::uint64_t step = 0;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  AdamWGroup text;
  AdamWGroup vision;

  bool operator==(const AdamWState&) const = default;
};

AdamWState make_adamw_state(const AdapterParams& params, const TrainConfig& config);

// One decoupled-weight-decay update of a single tensor; `step` is the
// 1-based step count used for bias correction.
void adamw_update(std::span<double> param, std::span<const double> grad,
                  std::span<double> first_moment, std::span<double> second_moment,
                  const AdamWGroup& group, std::uint64_t step, double lr_scale = 1.0);

// Updates every slot; `grads` follows for_each_slot order. Throws
// NumericalError naming the parameter, with nothing applied, when any
// gradient is non-finite.
void adamw_step(AdapterParams& params, std::span<const Matrix> grads, AdamWState& state,
                double lr_scale = 1.0);

// Gradients of graph.total w.r.t. every slot, in for_each_slot order.
std::vector<Matrix> slot_gradients(const EpisodeGraph& graph);

struct Checkpoint {
  TrainConfig config;
  int dim = 0;
  AdapterParams params;
  AdamWState optimizer;
  std::string rng_state;
  std::uint64_t episode = 0;
};

// Random initialization from config.seed.
Checkpoint initial_checkpoint(const TrainConfig& config, int dim);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct EpisodeMetrics {
  std::uint64_t episode = 0;
  LossBreakdown loss;
  double query_acc = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpisodeMetrics> log;
};

struct BankSet {
  const EmbeddingBank& visual;
  const EmbeddingBank& textual;
  const ClassGallery& gallery;
};

// Negatives actually mined per episode: the configured count, capped by the
// number of out-of-episode classes.
std::size_t effective_negatives(const Hyperparams& hyper, const EmbeddingBank& visual, int way);

// Runs episodes start.episode .. start.config.episodes - 1. Each episode:
// sample, optionally inject noise, reweight, build the loss graph, score the
// queries (before the update), backpropagate and take one AdamW step.
TrainResult train(const BankSet& banks, Checkpoint start);
TrainResult train(const BankSet& banks, const TrainConfig& config);

std::string metrics_csv(std::span<const EpisodeMetrics> log);

struct EvalOptions {
  int episodes = 100;
  double noise_rate = 0.0;
  std::uint64_t seed = 0;
  std::optional<bool> reweight;  // overrides the checkpoint's setting
  int workers = 1;
};

struct EvalSummary {
  double acc_mean = 0.0;
  double acc_stderr = 0.0;
  double acc_ci95 = 0.0;  // half-width, 1.96 standard errors
  double baseline_mean = 0.0;
  std::vector<double> per_episode;
  std::vector<double> baseline_per_episode;
};

// Scores fresh episodes with fixed parameters. Results are independent of
// `workers`.
EvalSummary evaluate(const Checkpoint& checkpoint, const BankSet& banks,
                     const EvalOptions& options);

struct SweepRow {
  double rate = 0.0;
  bool reweight = true;
  double acc_mean = 0.0;
  double acc_ci95 = 0.0;
};

inline constexpr double kSweepRates[] = {0.0, 0.1, 0.25, 0.5};

// Reweighting on rows (ascending rate) then off rows; both arms see the same
// episodes and flips.
std::vector<SweepRow> noise_sweep(const Checkpoint& checkpoint, const BankSet& banks,
                                  int episodes, std::uint64_t seed, int workers = 1);

std::string sweep_csv(std::span<const SweepRow> rows);

}  // namespace pfnl
