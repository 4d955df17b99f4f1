#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include <unistd.h>

#include "pfnl/error.h"
#include "pfnl/trainer.h"
#include "test_support.h"

namespace pfnl {
namespace {

using testing::BankFixture;
using testing::synthetic;

bool same_params(const AdapterParams& a, const AdapterParams& b) {
  std::vector<Matrix> left, right;
  for_each_slot(a, [&](const std::string&, ParamGroup, RegSlot, const Matrix& m) {
    left.push_back(m);
  });
  for_each_slot(b, [&](const std::string&, ParamGroup, RegSlot, const Matrix& m) {
    right.push_back(m);
  });
  return left == right;
}

bool same_log(const std::vector<EpisodeMetrics>& a, const std::vector<EpisodeMetrics>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].episode != b[i].episode || a[i].loss.total != b[i].loss.total ||
        a[i].loss.loss_pos != b[i].loss.loss_pos || a[i].loss.loss_neg != b[i].loss.loss_neg ||
        a[i].loss.reg != b[i].loss.reg || a[i].query_acc != b[i].query_acc) {
      return false;
    }
  }
  return true;
}

TEST(AdamW, ZeroGradientWithoutDecayLeavesParameters) {
  AdamWGroup g;
  g.weight_decay = 0.0;
  Vector p{0.5, -2.0}, grad{0, 0}, m{0, 0}, v{0, 0};
  adamw_update(p, grad, m, v, g, 1);
  EXPECT_EQ(p, (Vector{0.5, -2.0}));
}

TEST(AdamW, StepCountAdvances) {
  TrainConfig c;
  const Checkpoint ck = initial_checkpoint(c, 4);
  AdapterParams p = ck.params;
  AdamWState s = ck.optimizer;
  std::vector<Matrix> zeros;
  for_each_slot(p, [&](const std::string&, ParamGroup, RegSlot, const Matrix& m) {
    zeros.emplace_back(m.rows(), m.cols());
  });
  adamw_step(p, zeros, s);
  adamw_step(p, zeros, s);
  EXPECT_EQ(s.step, 2u);
}

TEST(AdamW, FirstStepClosedForm) {
  AdamWGroup g;
  g.weight_decay = 0.0;
  Vector p{0.0}, grad{1.0}, m{0.0}, v{0.0};
  adamw_update(p, grad, m, v, g, 1);
  // m_hat = v_hat = 1, so the step is lr / (1 + eps).
  EXPECT_NEAR(p[0], -1e-3 / (1.0 + 1e-8), 1e-18);
  EXPECT_NEAR(p[0], -1e-3, 1e-10);
}

TEST(AdamW, DecoupledDecayWithZeroGradient) {
  AdamWGroup g;
  g.lr = 0.1;
  g.weight_decay = 0.5;
  Vector p{2.0, -4.0}, grad{0, 0}, m{0, 0}, v{0, 0};
  adamw_update(p, grad, m, v, g, 1);
  EXPECT_NEAR(p[0], 2.0 * (1 - 0.05), 1e-15);
  EXPECT_NEAR(p[1], -4.0 * (1 - 0.05), 1e-15);
}

TEST(AdamW, SeveralStepsMatchTheRecurrence) {
  AdamWGroup g;
  g.lr = 3e-2;
  g.weight_decay = 0.1;
  const double grads[] = {0.7, -1.3, 0.2, 2.5};
  Vector p{0.4}, m{0.0}, v{0.0};
  double theta = 0.4, mo = 0.0, vo = 0.0;
  for (int t = 1; t <= 4; ++t) {
    const double gr = grads[t - 1];
    adamw_update(p, Vector{gr}, m, v, g, t);
    mo = 0.9 * mo + 0.1 * gr;
    vo = 0.999 * vo + 0.001 * gr * gr;
    const double mh = mo / (1 - std::pow(0.9, t));
    const double vh = vo / (1 - std::pow(0.999, t));
    theta -= 3e-2 * (mh / (std::sqrt(vh) + 1e-8) + 0.1 * theta);
    EXPECT_NEAR(p[0], theta, 1e-10);
  }
}

TEST(AdamW, NonFiniteGradientNamesTheParameterAndAppliesNothing) {
  const Checkpoint ck = initial_checkpoint(TrainConfig{}, 4);
  AdapterParams p = ck.params;
  AdamWState s = ck.optimizer;
  std::vector<Matrix> grads;
  for_each_slot(p, [&](const std::string&, ParamGroup, RegSlot, const Matrix& m) {
    grads.emplace_back(m.rows(), m.cols(), 1.0);
  });
  grads.back()[0] = NAN;
  try {
    adamw_step(p, grads, s);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("vision.norm_bias"), std::string::npos);
  }
  EXPECT_TRUE(same_params(p, ck.params));
  EXPECT_EQ(s.step, 0u);
}

TrainConfig fixture_config(int episodes) {
  TrainConfig c;
  c.episodes = episodes;
  c.lr_text = c.lr_vision = 1e-2;
  c.seed = 5;
  return c;
}

TEST(Train, ZeroEpisodesKeepsInitialization) {
  const BankFixture f(synthetic(5, 20, 16, 2.0, 70));
  const TrainResult r = train(f.set(), fixture_config(0));
  EXPECT_TRUE(r.log.empty());
  EXPECT_TRUE(same_params(r.checkpoint.params, initial_checkpoint(fixture_config(0), 16).params));
}

TEST(Train, SameSeedGivesIdenticalLogs) {
  const BankFixture f(synthetic(5, 20, 16, 2.0, 71));
  const TrainResult a = train(f.set(), fixture_config(15));
  const TrainResult b = train(f.set(), fixture_config(15));
  EXPECT_TRUE(same_log(a.log, b.log));
  EXPECT_EQ(metrics_csv(a.log), metrics_csv(b.log));
  EXPECT_TRUE(same_params(a.checkpoint.params, b.checkpoint.params));
}

TEST(Train, RejectsMismatchedBanks) {
  const BankFixture f(synthetic(5, 20, 8, 2.0, 72));
  EXPECT_THROW(train(f.set(), initial_checkpoint(fixture_config(1), 16)), DimensionError);
  const BankSet swapped{f.banks.textual, f.banks.visual, f.gallery};
  EXPECT_THROW(train(swapped, fixture_config(1)), DataError);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() /
         ("pfnl_trainer_" + std::to_string(::getpid()) + "_" + name);
}

TEST(Checkpoint, EncodeDecodeRoundTrip) {
  const BankFixture f(synthetic(5, 20, 16, 2.0, 73));
  const Checkpoint c = train(f.set(), fixture_config(5)).checkpoint;
  const auto bytes = encode_checkpoint(c);
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_TRUE(same_params(back.params, c.params));
  EXPECT_EQ(back.optimizer, c.optimizer);
  EXPECT_EQ(back.rng_state, c.rng_state);
  EXPECT_EQ(back.episode, c.episode);
  EXPECT_EQ(back.dim, c.dim);
  EXPECT_EQ(to_canonical_text(back.config), to_canonical_text(c.config));
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "PFNL");
}

TEST(Checkpoint, CorruptionIsDetected) {
  auto bytes = encode_checkpoint(initial_checkpoint(TrainConfig{}, 4));
  bytes[bytes.size() / 2] ^= 0x01;
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
  bytes.resize(bytes.size() - 6);
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}

TEST(Checkpoint, ResumedTrainingIsBitIdentical) {
  const BankFixture f(synthetic(5, 20, 16, 2.0, 74));
  const TrainResult full = train(f.set(), fixture_config(30));
  const TrainResult first = train(f.set(), fixture_config(12));
  const auto path = temp_path("resume.pfnl");
  save_checkpoint(first.checkpoint, path.string());
  Checkpoint loaded = load_checkpoint(path.string());
  std::filesystem::remove(path);
  loaded.config.episodes = 30;
  const TrainResult rest = train(f.set(), loaded);
  std::vector<EpisodeMetrics> joined = first.log;
  joined.insert(joined.end(), rest.log.begin(), rest.log.end());
  EXPECT_TRUE(same_log(joined, full.log));
  EXPECT_TRUE(same_params(rest.checkpoint.params, full.checkpoint.params));
  EXPECT_EQ(rest.checkpoint.optimizer, full.checkpoint.optimizer);
  EXPECT_EQ(encode_checkpoint(rest.checkpoint), encode_checkpoint(full.checkpoint));
}

TEST(Checkpoint, ReloadGivesIdenticalEvaluation) {
  const BankFixture f(synthetic(5, 20, 16, 2.0, 75));
  const Checkpoint c = train(f.set(), fixture_config(10)).checkpoint;
  const Checkpoint back = decode_checkpoint(encode_checkpoint(c));
  EvalOptions o;
  o.episodes = 20;
  o.seed = 3;
  EXPECT_EQ(evaluate(c, f.set(), o).per_episode, evaluate(back, f.set(), o).per_episode);
}

TEST(Checkpoint, MissingFileIsAnIoError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/none.pfnl"), IoError);
}

TEST(Train, TrailingLossDoesNotRise) {
  const BankFixture f(synthetic(5, 40, 16, 2.0, 76));
  TrainConfig c = fixture_config(300);
  c.lr_text = c.lr_vision = 1e-3;
  const TrainResult r = train(f.set(), c);
  std::vector<double> block;
  for (std::size_t start = 0; start + 50 <= r.log.size(); start += 50) {
    double sum = 0.0;
    for (std::size_t i = start; i < start + 50; ++i) sum += r.log[i].loss.total;
    block.push_back(sum / 50.0);
  }
  ASSERT_EQ(block.size(), 6u);
  for (std::size_t j = 1; j < block.size(); ++j) {
    EXPECT_LE(block[j], 1.05 * block[j - 1]) << "window " << j;
  }
}

TEST(Train, AdaptationBeatsZeroShot) {
  const BankFixture f(synthetic(5, 40, 16, 2.0, 100));
  const TrainResult r = train(f.set(), fixture_config(300));
  double trailing = 0.0;
  for (std::size_t i = 200; i < 300; ++i) trailing += r.log[i].query_acc;
  trailing /= 100.0;
  EvalOptions o;
  o.episodes = 100;
  o.seed = 1000;
  const EvalSummary s = evaluate(r.checkpoint, f.set(), o);
  EXPECT_GE(s.acc_mean - s.baseline_mean, 0.05);
  EXPECT_GE(trailing - s.baseline_mean, 0.05);
}

TEST(Evaluate, DeterministicAndWorkerIndependent) {
  const BankFixture f(synthetic(5, 20, 16, 2.0, 77));
  const Checkpoint c = train(f.set(), fixture_config(10)).checkpoint;
  EvalOptions o;
  o.episodes = 40;
  o.seed = 9;
  o.noise_rate = 0.25;
  const EvalSummary a = evaluate(c, f.set(), o);
  const EvalSummary b = evaluate(c, f.set(), o);
  o.workers = 4;
  const EvalSummary w = evaluate(c, f.set(), o);
  EXPECT_EQ(a.per_episode, b.per_episode);
  EXPECT_EQ(a.per_episode, w.per_episode);
  EXPECT_EQ(a.acc_mean, w.acc_mean);
  EXPECT_EQ(a.acc_ci95, w.acc_ci95);
  EXPECT_NEAR(a.acc_ci95, 1.96 * a.acc_stderr, 1e-15);
}

TEST(Evaluate, NoiseHurtsOnASeparableBank) {
  const BankFixture f(synthetic(5, 20, 16, 4.0, 78));
  const Checkpoint c = train(f.set(), fixture_config(50)).checkpoint;
  EvalOptions o;
  o.episodes = 50;
  o.seed = 2;
  const double clean = evaluate(c, f.set(), o).acc_mean;
  o.noise_rate = 1.0;
  const double noisy = evaluate(c, f.set(), o).acc_mean;
  EXPECT_GT(clean, noisy);
}

TEST(Evaluate, NoiselessBankIsPerfect) {
  const BankFixture f(synthetic(5, 20, 16, INFINITY, 79));
  const Checkpoint c = train(f.set(), fixture_config(100)).checkpoint;
  EvalOptions o;
  o.episodes = 50;
  o.seed = 4;
  EXPECT_EQ(evaluate(c, f.set(), o).acc_mean, 1.0);
}

TEST(Evaluate, RejectsBadOptions) {
  const BankFixture f(synthetic(5, 20, 16, 2.0, 80));
  const Checkpoint c = initial_checkpoint(fixture_config(0), 16);
  EvalOptions o;
  o.episodes = 0;
  EXPECT_THROW(evaluate(c, f.set(), o), ConfigError);
  o.episodes = 5;
  o.noise_rate = 1.5;
  EXPECT_THROW(evaluate(c, f.set(), o), ConfigError);
}

TEST(Metrics, CsvHeaderAndRows) {
  const BankFixture f(synthetic(5, 20, 16, 2.0, 81));
  const TrainResult r = train(f.set(), fixture_config(3));
  std::istringstream in(metrics_csv(r.log));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "episode,loss_total,loss_pos,loss_neg,reg,query_acc");
  int rows = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(line.substr(0, line.find(',')), std::to_string(rows));
    ++rows;
  }
  EXPECT_EQ(rows, 3);
}

TEST(NoiseSweep, EightRowsAscendingPerGroup) {
  const BankFixture f(synthetic(5, 20, 16, 2.0, 82));
  const Checkpoint c = train(f.set(), fixture_config(5)).checkpoint;
  const auto rows = noise_sweep(c, f.set(), 10, 1, 2);
  ASSERT_EQ(rows.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(rows[i].reweight, i < 4);
    EXPECT_EQ(rows[i].rate, kSweepRates[i % 4]);
  }
  std::istringstream in(sweep_csv(rows));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "rate,reweight,acc_mean,acc_ci95");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 8), "0.00,on,");
}

TEST(Negatives, CappedByOutOfEpisodeClasses) {
  const BankFixture f(synthetic(6, 10, 4, 2.0, 83));
  Hyperparams h;
  h.negatives = 3;
  EXPECT_EQ(effective_negatives(h, f.banks.visual, 5), 1u);
  EXPECT_EQ(effective_negatives(h, f.banks.visual, 2), 3u);
  EXPECT_EQ(effective_negatives(h, f.banks.visual, 6), 0u);
}

}  // namespace
}  // namespace pfnl
