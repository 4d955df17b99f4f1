#include "pfnl/cli.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "pfnl/bank.h"
#include "pfnl/binary_io.h"
#include "pfnl/config.h"
#include "pfnl/error.h"
#include "pfnl/trainer.h"

namespace pfnl {
namespace {

using Json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string crc_hex(std::uint32_t crc) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%08x", crc);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// Collects what every command reports about itself.
class Manifest {
 public:
  explicit Manifest(std::string command)
      : start_(Clock::now()), body_(Json::object()) {
    body_["tool"] = "pfnl";
    body_["version"] = kToolVersion;
    body_["command"] = std::move(command);
    body_["started_at"] = utc_now();
    body_["config"] = Json::object();
    body_["inputs"] = Json::array();
    body_["outputs"] = Json::array();
  }

  Json& config() { return body_["config"]; }
  Json& extra() { return body_; }

  void input(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    body_["inputs"].push_back(
        {{"path", path}, {"crc32", crc_hex(crc32_of(bytes.data(), bytes.size()))}});
  }
  void input(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    body_["inputs"].push_back(
        {{"path", path}, {"crc32", crc_hex(crc32_of(bytes.data(), bytes.size()))}});
  }
  void output(const std::string& path) { body_["outputs"].push_back(path); }

  // Writes to `path`, or to `fallback` when the path is empty.
  void emit(const std::string& path, std::ostream& fallback) {
    const double secs = std::chrono::duration<double>(Clock::now() - start_).count();
    body_["wall_clock_seconds"] = secs;
    const std::string text = body_.dump(2) + "\n";
    if (path.empty()) {
      fallback << text;
    } else {
      write_text(path, text);
    }
  }

 private:
  Clock::time_point start_;
  Json body_;
};

int default_workers() {
  const char* env = std::getenv("PFNL_WORKERS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError(std::string("bad PFNL_WORKERS value '") + env + "'");
  return static_cast<int>(v);
}

Modality parse_modality(const std::string& s) {
  if (s == "visual") return Modality::kVisual;
  if (s == "textual") return Modality::kTextual;
  throw ConfigError("modality must be visual|textual, got '" + s + "'");
}

const char* modality_name(Modality m) { return m == Modality::kVisual ? "visual" : "textual"; }

struct Banks {
  EmbeddingBank visual;
  EmbeddingBank textual;
  ClassGallery gallery;

  BankSet view() const { return {visual, textual, gallery}; }
};

Banks load_banks(const std::string& visual_path, const std::string& textual_path,
                 Manifest& manifest) {
  Banks b;
  b.visual = load_bank(visual_path, Modality::kVisual);
  b.textual = load_bank(textual_path, Modality::kTextual);
  if (b.visual.modality != Modality::kVisual) throw DataError(visual_path + " is not a visual bank");
  if (b.textual.modality != Modality::kTextual) {
    throw DataError(textual_path + " is not a textual bank");
  }
  if (b.visual.classes != b.textual.classes) {
    throw DataError("visual and textual banks have different class tables");
  }
  b.gallery = ClassGallery::from_textual(b.textual);
  manifest.input(visual_path);
  manifest.input(textual_path);
  return b;
}

std::string with_suffix(const std::string& explicit_path, const std::string& base,
                        const char* suffix) {
  return explicit_path.empty() ? base + suffix : explicit_path;
}

// ---- synth ----

struct SynthArgs {
  SyntheticOptions options;
  std::string prefix;
  std::string manifest;
};

int cmd_synth(const SynthArgs& a, std::ostream& out, std::ostream&) {
  Manifest manifest("synth");
  const BankPair banks = generate_synthetic(a.options);
  const std::string visual = a.prefix + ".visual.ebnk";
  const std::string textual = a.prefix + ".textual.ebnk";
  save_bank(banks.visual, visual);
  save_bank(banks.textual, textual);

  const SyntheticOptions& o = a.options;
  manifest.config() = {{"classes", o.n_classes},     {"per_class", o.per_class},
                       {"dim", o.dim},               {"separation", o.separation},
                       {"seed", o.seed},             {"text_noise", o.text_noise},
                       {"outlier_fraction", o.outlier_fraction},
                       {"outlier_scale", o.outlier_scale}};
  manifest.output(visual);
  manifest.output(textual);
  const std::string manifest_path = with_suffix(a.manifest, a.prefix, ".manifest.json");
  manifest.output(manifest_path);
  manifest.emit(manifest_path, out);
  out << "wrote " << visual << " and " << textual << "\n";
  return kExitOk;
}

// ---- train ----

struct TrainArgs {
  std::string visual;
  std::string textual;
  std::string out;
  std::string metrics;
  std::string config_file;
  std::string resume;
  std::string manifest;
  int workers = 1;
  std::map<std::string, std::string> flags;  // config key -> value given on the command line
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream&) {
  Manifest manifest("train");
  Banks banks = load_banks(a.visual, a.textual, manifest);

  Checkpoint start;
  if (!a.resume.empty()) {
    const auto bytes = read_file_bytes(a.resume);
    start = decode_checkpoint(bytes);
    manifest.input(a.resume, bytes);
    for (const auto& [key, value] : a.flags) {
      if (key != "episodes") {
        throw ConfigError("--" + key + " cannot change a resumed run; only --episodes may");
      }
      KeyValues kv = to_key_values(start.config);
      kv["episodes"] = value;
      start.config = config_from_key_values(kv);
    }
    if (!a.config_file.empty()) throw ConfigError("--config cannot be combined with --resume");
  } else {
    KeyValues kv;
    if (!a.config_file.empty()) {
      const auto bytes = read_file_bytes(a.config_file);
      kv = parse_key_values(std::string(bytes.begin(), bytes.end()));
      manifest.input(a.config_file, bytes);
    }
    for (const auto& [key, value] : a.flags) kv[key] = value;
    const TrainConfig config = config_from_key_values(kv);
    start = initial_checkpoint(config, static_cast<int>(banks.visual.dim));
  }

  for (const auto& [key, value] : to_key_values(start.config)) manifest.config()[key] = value;
  manifest.extra()["workers"] = a.workers;
  manifest.extra()["start_episode"] = start.episode;

  const TrainResult result = train(banks.view(), start);
  save_checkpoint(result.checkpoint, a.out);
  const std::string metrics = with_suffix(a.metrics, a.out, ".metrics.csv");
  write_text(metrics, metrics_csv(result.log));

  manifest.output(a.out);
  manifest.output(metrics);
  const std::string manifest_path = with_suffix(a.manifest, a.out, ".manifest.json");
  manifest.output(manifest_path);
  manifest.emit(manifest_path, out);

  out << "trained episodes " << start.episode << ".." << result.checkpoint.episode;
  if (!result.log.empty()) {
    const std::size_t tail = std::min<std::size_t>(50, result.log.size());
    double acc = 0.0;
    for (std::size_t i = result.log.size() - tail; i < result.log.size(); ++i) {
      acc += result.log[i].query_acc;
    }
    out << ", final loss " << format_double(result.log.back().loss.total)
        << ", trailing query acc " << format_double(acc / static_cast<double>(tail));
  }
  out << "\n";
  return kExitOk;
}

// ---- eval / noise-sweep ----

struct EvalArgs {
  std::string checkpoint;
  std::string visual;
  std::string textual;
  std::string out;
  std::string manifest;
  std::string reweight;  // empty: use the checkpoint setting
  int episodes = 100;
  double noise_rate = 0.0;
  std::uint64_t seed = 0;
  int workers = 1;
};

Checkpoint load_checkpoint_into(const std::string& path, Manifest& manifest) {
  const auto bytes = read_file_bytes(path);
  Checkpoint c = decode_checkpoint(bytes);
  manifest.input(path, bytes);
  for (const auto& [key, value] : to_key_values(c.config)) manifest.config()[key] = value;
  return c;
}

void finish(Manifest& manifest, const std::string& result_path, const std::string& text,
            const std::string& manifest_flag, std::ostream& out, std::ostream& err) {
  if (result_path.empty()) {
    out << text;
    if (!manifest_flag.empty()) manifest.output(manifest_flag);
    manifest.emit(manifest_flag, err);
    return;
  }
  write_text(result_path, text);
  manifest.output(result_path);
  const std::string manifest_path = with_suffix(manifest_flag, result_path, ".manifest.json");
  manifest.output(manifest_path);
  manifest.emit(manifest_path, err);
}

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  Manifest manifest("eval");
  const Checkpoint checkpoint = load_checkpoint_into(a.checkpoint, manifest);
  Banks banks = load_banks(a.visual, a.textual, manifest);

  EvalOptions options;
  options.episodes = a.episodes;
  options.noise_rate = a.noise_rate;
  options.seed = a.seed;
  options.workers = a.workers;
  if (a.reweight == "on") options.reweight = true;
  if (a.reweight == "off") options.reweight = false;
  const bool reweight = options.reweight.value_or(checkpoint.config.reweight);
  manifest.extra()["eval"] = {{"episodes", a.episodes}, {"noise_rate", a.noise_rate},
                              {"seed", a.seed},         {"reweight", reweight ? "on" : "off"},
                              {"workers", a.workers}};

  const EvalSummary s = evaluate(checkpoint, banks.view(), options);
  std::string csv = "episodes,noise_rate,reweight,acc_mean,acc_stderr,acc_ci95,baseline_mean\n";
  char line[256];
  std::snprintf(line, sizeof(line), "%d,%.2f,%s,%.10g,%.10g,%.10g,%.10g\n", a.episodes,
                a.noise_rate, reweight ? "on" : "off", s.acc_mean, s.acc_stderr, s.acc_ci95,
                s.baseline_mean);
  csv += line;
  finish(manifest, a.out, csv, a.manifest, out, err);
  return kExitOk;
}

int cmd_noise_sweep(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  Manifest manifest("noise-sweep");
  const Checkpoint checkpoint = load_checkpoint_into(a.checkpoint, manifest);
  Banks banks = load_banks(a.visual, a.textual, manifest);
  manifest.extra()["eval"] = {
      {"episodes", a.episodes}, {"seed", a.seed}, {"workers", a.workers}};
  const auto rows = noise_sweep(checkpoint, banks.view(), a.episodes, a.seed, a.workers);
  finish(manifest, a.out, sweep_csv(rows), a.manifest, out, err);
  return kExitOk;
}

// ---- inspect ----

struct InspectArgs {
  std::vector<std::string> banks;
  std::string modality = "visual";
  std::string manifest;
};

std::string describe(const std::string& path, const EmbeddingBank& bank) {
  std::ostringstream s;
  s << "bank " << path << "\n";
  s << "  modality: " << modality_name(bank.modality) << "\n";
  s << "  dim: " << bank.dim << "\n";
  s << "  classes: " << bank.class_count() << "\n";
  s << "  records: " << bank.records.size() << "\n";
  const auto by_class = bank.records_by_class();
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    s << "  count " << bank.classes[c] << ": " << by_class[c].size() << "\n";
  }
  if (!bank.records.empty()) {
    double lo = INFINITY, hi = -INFINITY, sum = 0.0, sum_sq = 0.0;
    for (const BankRecord& r : bank.records) {
      const double n = norm(r.features);
      lo = std::min(lo, n);
      hi = std::max(hi, n);
      sum += n;
      sum_sq += n * n;
    }
    const double count = static_cast<double>(bank.records.size());
    const double mean = sum / count;
    const double sd = std::sqrt(std::max(0.0, sum_sq / count - mean * mean));
    s << "  norm min: " << format_double(lo) << "\n";
    s << "  norm mean: " << format_double(mean) << "\n";
    s << "  norm max: " << format_double(hi) << "\n";
    s << "  norm sd: " << format_double(sd) << "\n";
  }
  return s.str();
}

int cmd_inspect(const InspectArgs& a, std::ostream& out, std::ostream& err) {
  Manifest manifest("inspect");
  const Modality csv_modality = parse_modality(a.modality);
  const EmbeddingBank* visual = nullptr;
  const EmbeddingBank* textual = nullptr;
  std::vector<EmbeddingBank> loaded;
  loaded.reserve(a.banks.size());
  for (const std::string& path : a.banks) {
    loaded.push_back(load_bank(path, csv_modality));
    manifest.input(path);
    out << describe(path, loaded.back());
  }
  for (const EmbeddingBank& b : loaded) {
    (b.modality == Modality::kVisual ? visual : textual) = &b;
  }
  if (visual != nullptr && textual != nullptr) {
    if (visual->classes != textual->classes) {
      throw DataError("class tables differ between the visual and textual banks");
    }
    if (visual->dim != textual->dim) throw DataError("bank dimensions differ");
    out << "class tables match\n";
  }
  if (!a.manifest.empty()) manifest.output(a.manifest);
  manifest.emit(a.manifest, err);
  return kExitOk;
}

int exit_code_for(const Error& e) {
  if (dynamic_cast<const NumericalError*>(&e)) return kExitNumerical;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const SamplingError*>(&e) ||
      dynamic_cast<const MiningError*>(&e)) {
    return kExitUsage;
  }
  return kExitIo;
}

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot vision-language adaptation on frozen embeddings"};
  app.name("pfnl");
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  int workers = 1;
  try {
    workers = default_workers();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic visual/textual bank pair");
  s->add_option("--classes", synth.options.n_classes, "Number of classes")->capture_default_str();
  s->add_option("--per-class", synth.options.per_class, "Visual records per class")
      ->capture_default_str();
  s->add_option("--dim", synth.options.dim, "Embedding dimension")->capture_default_str();
  s->add_option("--sep", synth.options.separation, "Cluster separation")->capture_default_str();
  s->add_option("--seed", synth.options.seed, "Generator seed")->capture_default_str();
  s->add_option("--text-noise", synth.options.text_noise, "Text perturbation stddev")
      ->capture_default_str();
  s->add_option("--outlier-fraction", synth.options.outlier_fraction,
                "Fraction of atypical visual records")
      ->capture_default_str();
  s->add_option("--outlier-scale", synth.options.outlier_scale,
                "Noise multiplier for atypical records")
      ->capture_default_str();
  s->add_option("--out-prefix", synth.prefix, "Output path prefix")->required();
  s->add_option("--manifest", synth.manifest, "Manifest path");

  TrainArgs train_args;
  train_args.workers = workers;
  auto* t = app.add_subcommand("train", "Train an adapter on a bank pair");
  t->add_option("--visual", train_args.visual, "Visual bank (EBNK or CSV)")->required();
  t->add_option("--textual", train_args.textual, "Textual bank (EBNK or CSV)")->required();
  t->add_option("--out", train_args.out, "Checkpoint path")->required();
  t->add_option("--metrics", train_args.metrics, "Metrics CSV path (default <out>.metrics.csv)");
  t->add_option("--config", train_args.config_file, "key=value config file");
  t->add_option("--resume", train_args.resume, "Continue from a checkpoint");
  t->add_option("--manifest", train_args.manifest, "Manifest path");
  t->add_option("--workers", train_args.workers, "Worker threads")->check(CLI::PositiveNumber);
  std::map<std::string, std::string> raw_flags;
  std::vector<std::pair<std::string, CLI::Option*>> config_options;
  for (const auto& [key, value] : to_key_values(TrainConfig{})) {
    CLI::Option* opt =
        t->add_option("--" + dashed(key), raw_flags[key], "default " + value)
            ->group("Config")
            ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    config_options.emplace_back(key, opt);
  }

  EvalArgs eval_args;
  eval_args.workers = workers;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on fresh episodes");
  auto add_eval_common = [](CLI::App* sub, EvalArgs& a) {
    sub->add_option("--checkpoint", a.checkpoint, "Checkpoint path")->required();
    sub->add_option("--visual", a.visual, "Visual bank")->required();
    sub->add_option("--textual", a.textual, "Textual bank")->required();
    sub->add_option("--seed", a.seed, "Episode seed")->capture_default_str();
    sub->add_option("--workers", a.workers, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out", a.out, "Result CSV path (default stdout)");
    sub->add_option("--manifest", a.manifest, "Manifest path");
  };
  add_eval_common(e, eval_args);
  e->add_option("--episodes", eval_args.episodes, "Episodes")->capture_default_str();
  e->add_option("--noise-rate", eval_args.noise_rate, "Support label noise rate")
      ->capture_default_str();
  e->add_option("--reweight", eval_args.reweight, "Override reweighting")
      ->check(CLI::IsMember({"on", "off"}));

  EvalArgs sweep_args;
  sweep_args.workers = workers;
  sweep_args.episodes = 200;
  auto* n = app.add_subcommand("noise-sweep", "Accuracy across label-noise rates, reweighting on/off");
  add_eval_common(n, sweep_args);
  n->add_option("--episodes", sweep_args.episodes, "Episodes per cell")->capture_default_str();

  InspectArgs inspect_args;
  auto* i = app.add_subcommand("inspect", "Summarize and validate bank files");
  i->add_option("banks", inspect_args.banks, "Bank files")->required();
  i->add_option("--modality", inspect_args.modality, "Modality for CSV banks")
      ->check(CLI::IsMember({"visual", "textual"}))
      ->capture_default_str();
  i->add_option("--manifest", inspect_args.manifest, "Manifest path (default stderr)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (app.got_subcommand(s)) return cmd_synth(synth, out, err);
    if (app.got_subcommand(t)) {
      for (const auto& [key, opt] : config_options) {
        if (opt->count() > 0) train_args.flags[key] = raw_flags[key];
      }
      return cmd_train(train_args, out, err);
    }
    if (app.got_subcommand(e)) return cmd_eval(eval_args, out, err);
    if (app.got_subcommand(n)) return cmd_noise_sweep(sweep_args, out, err);
    if (app.got_subcommand(i)) return cmd_inspect(inspect_args, out, err);
  } catch (const Error& ex) {
    err << "error: " << ex.what() << "\n";
    return exit_code_for(ex);
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return 1;
  }
  return kExitUsage;
}

}  // namespace pfnl
