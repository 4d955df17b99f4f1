#include "pfnl/trainer.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numbers>
#include <sstream>
#include <thread>

#include "pfnl/binary_io.h"
#include "pfnl/error.h"
#include "pfnl/reweight.h"
#include "pfnl/rng.h"

namespace pfnl {

// ---------------------------------------------------------------------------
// AdamW

AdamWState make_adamw_state(const AdapterParams& params, const TrainConfig& config) {
  AdamWState s;
  for_each_slot(params, [&](const std::string&, ParamGroup, RegSlot, const Matrix& m) {
    s.first_moment.emplace_back(m.rows(), m.cols());
    s.second_moment.emplace_back(m.rows(), m.cols());
  });
  s.text = {config.lr_text, config.beta1, config.beta2, config.adam_eps, config.weight_decay};
  s.vision = {config.lr_vision, config.beta1, config.beta2, config.adam_eps,
              config.weight_decay};
  return s;
}

void adamw_update(std::span<double> param, std::span<const double> grad,
                  std::span<double> first_moment, std::span<double> second_moment,
                  const AdamWGroup& group, std::uint64_t step, double lr_scale) {
  if (grad.size() != param.size() || first_moment.size() != param.size() ||
      second_moment.size() != param.size()) {
    throw DimensionError("adamw_update: shape mismatch");
  }
  if (step == 0) throw Error("adamw_update: step count starts at 1");
  const double lr = group.lr * lr_scale;
  const double t = static_cast<double>(step);
  const double correction1 = 1.0 - std::pow(group.beta1, t);
  const double correction2 = 1.0 - std::pow(group.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    first_moment[i] = group.beta1 * first_moment[i] + (1.0 - group.beta1) * grad[i];
    second_moment[i] =
        group.beta2 * second_moment[i] + (1.0 - group.beta2) * grad[i] * grad[i];
    const double m_hat = first_moment[i] / correction1;
    const double v_hat = second_moment[i] / correction2;
    param[i] -= lr * (m_hat / (std::sqrt(v_hat) + group.eps) + group.weight_decay * param[i]);
  }
}

void adamw_step(AdapterParams& params, std::span<const Matrix> grads, AdamWState& state,
                double lr_scale) {
  std::size_t index = 0;
  for_each_slot(params, [&](const std::string& name, ParamGroup, RegSlot, const Matrix& m) {
    if (index >= grads.size() || grads[index].rows() != m.rows() ||
        grads[index].cols() != m.cols()) {
      throw DimensionError("adamw_step: gradient shape mismatch for " + name);
    }
    if (!all_finite(grads[index].data())) {
      throw NumericalError("non-finite gradient for parameter " + name);
    }
    ++index;
  });
  if (index != grads.size() || index != state.first_moment.size()) {
    throw DimensionError("adamw_step: slot count mismatch");
  }
  ++state.step;
  index = 0;
  for_each_slot(params, [&](const std::string&, ParamGroup group, RegSlot, Matrix& m) {
    adamw_update(m.data(), grads[index].data(), state.first_moment[index].data(),
                 state.second_moment[index].data(),
                 group == ParamGroup::kText ? state.text : state.vision, state.step, lr_scale);
    ++index;
  });
}

std::vector<Matrix> slot_gradients(const EpisodeGraph& graph) {
  const Gradients grads = graph.tape->backward(graph.total);
  std::vector<Matrix> out;
  for_each_slot(graph.params, [&](const std::string&, ParamGroup, RegSlot, const Var& v) {
    out.push_back(grads.of(v));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[] = "PFNL";
constexpr std::uint32_t kCheckpointVersion = 1;

void write_block(ByteWriter& w, const std::string& name, const Matrix& m) {
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.bytes(name);
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  for (double v : m.data()) w.f64(v);
}

void read_block(ByteReader& r, const std::string& expected_name, Matrix& into) {
  const std::size_t at = r.offset();
  const std::uint16_t len = r.u16("block name length");
  const std::string name = r.bytes(len, "block name");
  if (name != expected_name) {
    throw FormatError("expected parameter block " + expected_name + ", found " + name, at);
  }
  const std::uint32_t rows = r.u32("block rows");
  const std::uint32_t cols = r.u32("block cols");
  if (rows != into.rows() || cols != into.cols()) {
    throw FormatError("block " + name + " has shape " + std::to_string(rows) + "x" +
                          std::to_string(cols) + ", expected " + shape_string(into),
                      at);
  }
  for (double& v : into.data()) v = r.f64("block data");
}

void write_group(ByteWriter& w, const AdamWGroup& g) {
  w.f64(g.lr);
  w.f64(g.beta1);
  w.f64(g.beta2);
  w.f64(g.eps);
  w.f64(g.weight_decay);
}

AdamWGroup read_group(ByteReader& r) {
  AdamWGroup g;
  g.lr = r.f64("optimizer group");
  g.beta1 = r.f64("optimizer group");
  g.beta2 = r.f64("optimizer group");
  g.eps = r.f64("optimizer group");
  g.weight_decay = r.f64("optimizer group");
  return g;
}

}  // namespace

Checkpoint initial_checkpoint(const TrainConfig& config, int dim) {
  config.validate();
  Checkpoint c;
  c.config = config;
  c.dim = dim;
  Rng rng(config.seed);
  c.params = init_params(config.arch(dim), rng);
  c.optimizer = make_adamw_state(c.params, config);
  c.rng_state = rng.serialize();
  c.episode = 0;
  return c;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.text(to_canonical_text(c.config));
  w.u32(static_cast<std::uint32_t>(c.dim));
  std::vector<std::string> names;
  for_each_slot(c.params, [&](const std::string& name, ParamGroup, RegSlot, const Matrix&) {
    names.push_back(name);
  });
  w.u32(static_cast<std::uint32_t>(names.size()));
  for_each_slot(c.params, [&](const std::string& name, ParamGroup, RegSlot, const Matrix& m) {
    write_block(w, name, m);
  });
  w.u64(c.optimizer.step);
  write_group(w, c.optimizer.text);
  write_group(w, c.optimizer.vision);
  w.u32(static_cast<std::uint32_t>(c.optimizer.first_moment.size()));
  for (std::size_t i = 0; i < names.size(); ++i) {
    write_block(w, "m/" + names[i], c.optimizer.first_moment.at(i));
    write_block(w, "v/" + names[i], c.optimizer.second_moment.at(i));
  }
  w.text(c.rng_state);
  w.u64(c.episode);
  w.finish_with_crc();
  return w.buffer();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  if (r.bytes(std::min<std::size_t>(4, r.remaining()), "magic") != kCheckpointMagic) {
    throw FormatError("bad magic, expected PFNL", 0);
  }
  const std::size_t version_at = r.offset();
  if (r.u32("version") != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version", version_at);
  }
  Checkpoint c;
  const std::size_t config_at = r.offset();
  try {
    c.config = config_from_key_values(parse_key_values(r.text("config")));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("bad embedded config: ") + e.what(), config_at);
  }
  c.dim = static_cast<int>(r.u32("dim"));
  c.params = identity_params(c.config.arch(c.dim));
  c.optimizer = make_adamw_state(c.params, c.config);
  const std::size_t count_at = r.offset();
  const std::uint32_t count = r.u32("parameter count");
  if (count != c.optimizer.first_moment.size()) {
    throw FormatError("parameter count does not match the configured architecture", count_at);
  }
  std::vector<std::string> names;
  for_each_slot(c.params, [&](const std::string& name, ParamGroup, RegSlot, Matrix& m) {
    read_block(r, name, m);
    names.push_back(name);
  });
  c.optimizer.step = r.u64("optimizer step");
  c.optimizer.text = read_group(r);
  c.optimizer.vision = read_group(r);
  const std::size_t moments_at = r.offset();
  if (r.u32("moment count") != names.size()) {
    throw FormatError("moment count mismatch", moments_at);
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    read_block(r, "m/" + names[i], c.optimizer.first_moment[i]);
    read_block(r, "v/" + names[i], c.optimizer.second_moment[i]);
  }
  c.rng_state = r.text("rng state");
  c.episode = r.u64("episode counter");
  r.verify_crc();
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path) {
  write_file_bytes(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// Training

std::size_t effective_negatives(const Hyperparams& hyper, const EmbeddingBank& visual,
                                int way) {
  const std::size_t available =
      visual.class_count() > static_cast<std::size_t>(way)
          ? visual.class_count() - static_cast<std::size_t>(way)
          : 0;
  return std::min(static_cast<std::size_t>(hyper.negatives), available);
}

namespace {

struct PreparedRun {
  PreparedEpisode episode;
  std::vector<double> weights;
};

PreparedRun prepare(const BankSet& banks, const TrainConfig& config, bool reweight,
                    const AdapterParams& params, std::uint64_t episode_seed,
                    double noise_rate, int way, int shot, int query) {
  Episode ep = sample_episode(banks.visual, banks.textual, way, shot, query, episode_seed);
  if (noise_rate > 0.0) ep = inject_label_noise(ep, noise_rate, mix_seed(episode_seed, 1));
  PreparedRun run;
  run.episode = prepare_episode(ep, banks.gallery,
                                effective_negatives(config.hyper, banks.visual, way));
  if (reweight) {
    run.weights =
        compute_weights(run.episode, params, config.hyper, config.reweight_rounds).weights;
  } else {
    run.weights.assign(run.episode.support.size(), 1.0);
  }
  return run;
}

std::string episode_dump(std::uint64_t index, const PreparedEpisode& ep,
                         const LossBreakdown& loss) {
  std::ostringstream out;
  out << "episode " << index << ": classes [";
  for (std::size_t i = 0; i < ep.classes.size(); ++i) out << (i ? " " : "") << ep.classes[i];
  out << "], support slots [";
  for (std::size_t i = 0; i < ep.support_slot.size(); ++i) {
    out << (i ? " " : "") << ep.support_slot[i];
  }
  out << "], loss_pos=" << loss.loss_pos << " loss_neg=" << loss.loss_neg
      << " reg=" << loss.reg << " total=" << loss.total;
  return out.str();
}

void check_banks(const BankSet& banks, int dim) {
  if (banks.visual.modality != Modality::kVisual) throw DataError("expected a visual bank");
  if (banks.textual.modality != Modality::kTextual) throw DataError("expected a textual bank");
  if (static_cast<int>(banks.visual.dim) != dim || static_cast<int>(banks.textual.dim) != dim) {
    throw DimensionError("bank dimension does not match the model dimension " +
                         std::to_string(dim));
  }
  if (banks.gallery.size() != banks.textual.class_count()) {
    throw DataError("gallery does not cover the textual bank");
  }
}

}  // namespace

TrainResult train(const BankSet& banks, Checkpoint state) {
  const TrainConfig& config = state.config;
  config.validate();
  check_banks(banks, state.dim);
  Rng rng = Rng::deserialize(state.rng_state);
  TrainResult result;
  const auto total = static_cast<std::uint64_t>(config.episodes);
  for (; state.episode < total; ++state.episode) {
    const std::uint64_t episode_seed = rng.next_u64();
    PreparedRun run = prepare(banks, config, config.reweight, state.params, episode_seed,
                              config.train_noise, config.way, config.shot, config.query);
    EpisodeGraph graph = total_loss(run.episode, state.params, config.hyper, run.weights);
    EpisodeMetrics m;
    m.episode = state.episode;
    m.loss = graph.breakdown();
    if (!std::isfinite(m.loss.total)) {
      throw NumericalError("non-finite loss; " + episode_dump(state.episode, run.episode, m.loss));
    }
    m.query_acc =
        accuracy(predict(run.episode, graph.prototypes(), config.hyper), run.episode.query_slot);
    const std::vector<Matrix> grads = slot_gradients(graph);
    double lr_scale = 1.0;
    if (config.schedule == LrSchedule::kCosine && total > 0) {
      lr_scale = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(state.episode) /
                                       static_cast<double>(total)));
    }
    try {
      adamw_step(state.params, grads, state.optimizer, lr_scale);
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + "; " +
                           episode_dump(state.episode, run.episode, m.loss));
    }
    result.log.push_back(m);
  }
  state.rng_state = rng.serialize();
  result.checkpoint = std::move(state);
  return result;
}

TrainResult train(const BankSet& banks, const TrainConfig& config) {
  return train(banks, initial_checkpoint(config, static_cast<int>(banks.visual.dim)));
}

std::string metrics_csv(std::span<const EpisodeMetrics> log) {
  std::string out = "episode,loss_total,loss_pos,loss_neg,reg,query_acc\n";
  char line[256];
  for (const EpisodeMetrics& m : log) {
    std::snprintf(line, sizeof(line), "%llu,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                  static_cast<unsigned long long>(m.episode), m.loss.total, m.loss.loss_pos,
                  m.loss.loss_neg, m.loss.reg, m.query_acc);
    out += line;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

struct EpisodeScore {
  double adapted = 0.0;
  double baseline = 0.0;
};

template <class F>
void parallel_for(int count, int workers, F&& body) {
  workers = std::max(1, std::min(workers, count));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < count; i += workers) body(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (std::thread& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void summarize(std::span<const double> values, double& mean, double& stderr_out) {
  const double n = static_cast<double>(values.size());
  mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  stderr_out = values.size() > 1 ? std::sqrt(var / (n - 1.0) / n) : 0.0;
}

}  // namespace

EvalSummary evaluate(const Checkpoint& checkpoint, const BankSet& banks,
                     const EvalOptions& options) {
  if (options.episodes < 1) throw ConfigError("evaluation needs at least one episode");
  if (!(options.noise_rate >= 0.0 && options.noise_rate <= 1.0)) {
    throw ConfigError("noise rate must lie in [0, 1]");
  }
  const TrainConfig& config = checkpoint.config;
  check_banks(banks, checkpoint.dim);
  const bool reweight = options.reweight.value_or(config.reweight);

  std::vector<EpisodeScore> scores(static_cast<std::size_t>(options.episodes));
  parallel_for(options.episodes, options.workers, [&](int i) {
    const std::uint64_t seed = mix_seed(options.seed, static_cast<std::uint64_t>(i));
    PreparedRun run = prepare(banks, config, reweight, checkpoint.params, seed,
                              options.noise_rate, config.way, config.shot, config.query);
    const FusedPrototypes protos =
        build_prototypes(run.episode, checkpoint.params, config.hyper, run.weights);
    EpisodeScore& s = scores[static_cast<std::size_t>(i)];
    s.adapted = accuracy(predict(run.episode, protos, config.hyper), run.episode.query_slot);
    s.baseline =
        accuracy(predict_baseline(run.episode, config.hyper), run.episode.query_slot);
  });

  EvalSummary out;
  for (const EpisodeScore& s : scores) {
    out.per_episode.push_back(s.adapted);
    out.baseline_per_episode.push_back(s.baseline);
  }
  summarize(out.per_episode, out.acc_mean, out.acc_stderr);
  double baseline_se = 0.0;
  summarize(out.baseline_per_episode, out.baseline_mean, baseline_se);
  out.acc_ci95 = 1.96 * out.acc_stderr;
  return out;
}

std::vector<SweepRow> noise_sweep(const Checkpoint& checkpoint, const BankSet& banks,
                                  int episodes, std::uint64_t seed, int workers) {
  std::vector<SweepRow> rows;
  for (bool reweight : {true, false}) {
    for (double rate : kSweepRates) {
      EvalOptions opts;
      opts.episodes = episodes;
      opts.noise_rate = rate;
      opts.seed = seed;
      opts.reweight = reweight;
      opts.workers = workers;
      const EvalSummary s = evaluate(checkpoint, banks, opts);
      rows.push_back({rate, reweight, s.acc_mean, s.acc_ci95});
    }
  }
  return rows;
}

std::string sweep_csv(std::span<const SweepRow> rows) {
  std::string out = "rate,reweight,acc_mean,acc_ci95\n";
  char line[128];
  for (const SweepRow& r : rows) {
    std::snprintf(line, sizeof(line), "%.2f,%s,%.10g,%.10g\n", r.rate,
                  r.reweight ? "on" : "off", r.acc_mean, r.acc_ci95);
    out += line;
  }
  return out;
}

}  // namespace pfnl
