#include "pfnl/config.h"

#include <charconv>
#include <functional>
#include <sstream>
#include <vector>

#include "pfnl/error.h"

namespace pfnl {

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("bad number for " + key + ": '" + v + "'");
  }
  return out;
}

long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("bad integer for " + key + ": '" + v + "'");
  }
  return out;
}

bool parse_switch(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ConfigError("expected on|off for " + key + ", got '" + v + "'");
}

template <class E>
E parse_choice(const std::string& key, const std::string& v,
               std::initializer_list<std::pair<const char*, E>> choices) {
  std::string names;
  for (const auto& [name, value] : choices) {
    if (v == name) return value;
    names += names.empty() ? name : std::string("|") + name;
  }
  throw ConfigError("expected " + names + " for " + key + ", got '" + v + "'");
}

struct Field {
  const char* key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

#define PFNL_INT_FIELD(name, member)                                                \
  Field {                                                                           \
    name, [](const TrainConfig& c) { return std::to_string(c.member); },              \
        [](TrainConfig& c, const std::string& v) {                                  \
          c.member = static_cast<decltype(c.member)>(parse_int(name, v));           \
        }                                                                           \
  }
#define PFNL_DOUBLE_FIELD(name, member)                                             \
  Field {                                                                           \
    name, [](const TrainConfig& c) { return format_double(c.member); },               \
        [](TrainConfig& c, const std::string& v) { c.member = parse_double(name, v); } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      PFNL_INT_FIELD("episodes", episodes),
      PFNL_INT_FIELD("way", way),
      PFNL_INT_FIELD("shot", shot),
      PFNL_INT_FIELD("query", query),
      PFNL_DOUBLE_FIELD("lr_text", lr_text),
      PFNL_DOUBLE_FIELD("lr_vision", lr_vision),
      PFNL_DOUBLE_FIELD("beta1", beta1),
      PFNL_DOUBLE_FIELD("beta2", beta2),
      PFNL_DOUBLE_FIELD("adam_eps", adam_eps),
      PFNL_DOUBLE_FIELD("weight_decay", weight_decay),
      PFNL_INT_FIELD("seed", seed),
      PFNL_DOUBLE_FIELD("lambda_fuse", hyper.lambda_fuse),
      PFNL_DOUBLE_FIELD("lambda_infer", hyper.lambda_infer),
      PFNL_DOUBLE_FIELD("tau_temp", hyper.tau_temp),
      PFNL_DOUBLE_FIELD("tau_margin", hyper.tau_margin),
      PFNL_DOUBLE_FIELD("gamma", hyper.gamma),
      PFNL_INT_FIELD("negatives", hyper.negatives),
      PFNL_DOUBLE_FIELD("tau_calib", hyper.tau_calib),
      PFNL_DOUBLE_FIELD("norm_eps", hyper.norm_eps),
      Field{"hinge",
            [](const TrainConfig& c) {
              return std::string(c.hyper.hinge == HingeMode::kProse ? "prose" : "paper");
            },
            [](TrainConfig& c, const std::string& v) {
              c.hyper.hinge = parse_choice<HingeMode>(
                  "hinge", v, {{"prose", HingeMode::kProse}, {"paper", HingeMode::kPaper}});
            }},
      Field{"reg_scope",
            [](const TrainConfig& c) {
              return std::string(c.hyper.reg_scope == RegScope::kPromptAndAttention
                                     ? "prompt"
                                     : "attention");
            },
            [](TrainConfig& c, const std::string& v) {
              c.hyper.reg_scope = parse_choice<RegScope>(
                  "reg_scope", v,
                  {{"prompt", RegScope::kPromptAndAttention},
                   {"attention", RegScope::kAttentionOnly}});
            }},
      Field{"negative_form",
            [](const TrainConfig& c) {
              return std::string(c.hyper.negative_form == NegativeForm::kAdapted ? "adapted"
                                                                                 : "prompt");
            },
            [](TrainConfig& c, const std::string& v) {
              c.hyper.negative_form = parse_choice<NegativeForm>(
                  "negative_form", v,
                  {{"adapted", NegativeForm::kAdapted}, {"prompt", NegativeForm::kPrompt}});
            }},
      Field{"activation",
            [](const TrainConfig& c) {
              return std::string(c.hyper.activation == Activation::kGelu ? "gelu" : "relu");
            },
            [](TrainConfig& c, const std::string& v) {
              c.hyper.activation = parse_choice<Activation>(
                  "activation", v, {{"gelu", Activation::kGelu}, {"relu", Activation::kRelu}});
            }},
      Field{"reweight", [](const TrainConfig& c) { return std::string(c.reweight ? "on" : "off"); },
            [](TrainConfig& c, const std::string& v) { c.reweight = parse_switch("reweight", v); }},
      PFNL_INT_FIELD("reweight_rounds", reweight_rounds),
      PFNL_INT_FIELD("styles", styles),
      PFNL_INT_FIELD("layers", layers),
      PFNL_INT_FIELD("hidden", hidden),
      Field{"schedule",
            [](const TrainConfig& c) {
              return std::string(c.schedule == LrSchedule::kConstant ? "constant" : "cosine");
            },
            [](TrainConfig& c, const std::string& v) {
              c.schedule = parse_choice<LrSchedule>(
                  "schedule", v,
                  {{"constant", LrSchedule::kConstant}, {"cosine", LrSchedule::kCosine}});
            }},
      PFNL_DOUBLE_FIELD("train_noise", train_noise),
  };
  return table;
}

#undef PFNL_INT_FIELD
#undef PFNL_DOUBLE_FIELD

}  // namespace

void TrainConfig::validate() const {
  if (episodes < 0) throw ConfigError("episodes must be >= 0");
  if (way < 2) throw ConfigError("way must be >= 2");
  if (shot < 1) throw ConfigError("shot must be >= 1");
  if (query < 1) throw ConfigError("query must be >= 1");
  if (!(lr_text > 0.0) || !(lr_vision > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (reweight_rounds < 1) throw ConfigError("reweight_rounds must be >= 1");
  if (styles < 1 || layers < 1 || hidden < 0) throw ConfigError("bad architecture sizes");
  if (!(train_noise >= 0.0 && train_noise <= 1.0)) throw ConfigError("train_noise must lie in [0, 1]");
  hyper.validate();
}

ArchConfig TrainConfig::arch(int dim) const {
  ArchConfig a;
  a.dim = dim;
  a.styles = styles;
  a.layers = layers;
  a.hidden = hidden;
  a.way = way;
  return a;
}

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + " lacks '='");
    }
    kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
  }
  return kv;
}

KeyValues to_key_values(const TrainConfig& config) {
  KeyValues kv;
  for (const Field& f : fields()) kv[f.key] = f.get(config);
  return kv;
}

std::string to_canonical_text(const TrainConfig& config) {
  std::string out;
  for (const auto& [k, v] : to_key_values(config)) out += k + "=" + v + "\n";
  return out;
}

TrainConfig config_from_key_values(const KeyValues& kv) {
  TrainConfig c;
  for (const auto& [key, value] : kv) {
    bool known = false;
    for (const Field& f : fields()) {
      if (key == f.key) {
        f.set(c, value);
        known = true;
        break;
      }
    }
    if (!known) throw ConfigError("unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

}  // namespace pfnl
